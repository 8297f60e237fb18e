import numpy as np
import pytest

from muae.schema import CHANNELS, lead_steps
from muae.synthgen import CaseRecord, ChannelSeries, StaticCovariates, SynthConfig, generate_case

DEFAULT_STATICS = StaticCovariates(age=55, sex=1, weight=70.0, height=170.0, asa=2)


def make_case(channel_values: dict, n: int, case_id: str = "caseX") -> CaseRecord:
    """A fully observed case with given per-channel constants or arrays."""
    channels = []
    for name in CHANNELS:
        v = channel_values.get(name, 1.0)
        values = np.full(n, float(v)) if np.isscalar(v) else np.asarray(v, dtype=np.float64)
        channels.append(ChannelSeries(name=name, values=values,
                                      missing_mask=np.zeros(n, dtype=bool)))
    return CaseRecord(case_id=case_id, statics=DEFAULT_STATICS, channels=channels,
                      duration_s=max(7200.0, n * 2.0))


# Nominal mid-band values, safely away from every event threshold.
NOMINAL = {
    "ART_MBP": 85.0, "BIS": 50.0, "HR": 75.0, "PLETH_SPO2": 98.0,
    "BT": 36.5, "ETCO2": 38.0,
}


@pytest.fixture(scope="session")
def small_cohort():
    cfg = SynthConfig(n_cases=6, seed=123)
    return cfg, [generate_case(cfg, i) for i in range(cfg.n_cases)]


@pytest.fixture(scope="session")
def lead150():
    return lead_steps(5)
