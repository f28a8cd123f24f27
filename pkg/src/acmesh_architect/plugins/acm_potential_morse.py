"""
Morse pair potential plugin (Cu defaults).
"""

from typing import Any

from acmesh_architect.model.potentials import MorsePotential

POTENTIAL_KIND = "MORSE_PAIR"
PLUGIN_DESCRIPTION = "Morse pair potential with a C² cutoff taper"


def build(params: dict[str, Any]) -> MorsePotential:
    return MorsePotential(**params)
