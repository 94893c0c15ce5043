import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from isingflow.dataset import generate
from isingflow.flow import FlowHyper, ModelBundle, train_encoder, train_field, train_projector
from isingflow.schedule import make_schedule

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_schedule(5.0, 1.0, 4)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_schedule):
    return generate(6, tiny_schedule, n_traj=3, k_count=4, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_dataset):
    hy = FlowHyper(latent_dim=9, encoder_epochs=300, field_epochs=50, projector_epochs=300, field_hidden=16, batch_size=16)
    enc, inv, l_enc = train_encoder(tiny_dataset, hy)
    fld, l_fld = train_field(tiny_dataset, enc, hy)
    proj, l_proj = train_projector(tiny_dataset, enc, hy)
    return ModelBundle(
        n=6,
        hyper=hy,
        encoder=enc,
        inverse_map=inv,
        field=fld,
        projector=proj,
        losses={"encoder": l_enc, "field": l_fld, "projector": l_proj},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
