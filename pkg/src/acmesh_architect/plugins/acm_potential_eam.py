"""
Analytic EAM plugin: Finnis–Sinclair √ρ embedding with exponential pair and density terms.
"""

from typing import Any

from acmesh_architect.model.potentials import FinnisSinclairPotential

POTENTIAL_KIND = "EAM_ANALYTIC"
PLUGIN_DESCRIPTION = "Analytic EAM (Finnis–Sinclair embedding, Born–Mayer pair)"


def build(params: dict[str, Any]) -> FinnisSinclairPotential:
    return FinnisSinclairPotential(**params)
