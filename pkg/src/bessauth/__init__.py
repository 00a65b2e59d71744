"""Battery-entropy challenge-reply authentication for utility-to-DER links.

A master agent authenticates a field outstation before every setpoint
command by challenging it for live cell measurements and rolling 8-bit
table secrets; a simulated li-ion series pack supplies the entropy.
"""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Path of a bundled data file (reference pack / scenario)."""
    return Path(resources.files(__package__) / "data" / name)


REFERENCE_PACK = "reference_pack.ini"
REFERENCE_SCENARIO = "reference.scenario"
