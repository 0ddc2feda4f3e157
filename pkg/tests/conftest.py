import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from caw.model import ClassPrototypeSet, DualEncoderModel, ImageEncoder, snapshot_frozen

settings.register_profile("caw", deadline=None, max_examples=60, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("caw")


def make_model(seed=0, input_dim=4, hidden=(5,), embed_dim=3, num_classes=3, temperature=0.5,
               drift=0.0, snapshot=True):
    """Small seeded model; ``drift`` perturbs the tuned encoder after the snapshot."""
    rng = np.random.default_rng(seed)
    enc = ImageEncoder.init(input_dim, hidden, embed_dim, rng)
    protos = ClassPrototypeSet.random(num_classes, embed_dim, rng)
    model = DualEncoderModel(enc, protos.vectors, temperature=temperature)
    if snapshot:
        snapshot_frozen(model)
    if drift:
        for p in model.tuned.parameters():
            p.data = p.data + drift * rng.normal(size=p.shape)
    return model


def make_batch(seed, n, input_dim, num_classes):
    rng = np.random.default_rng(seed + 1000)
    return rng.uniform(0, 1, size=(n, input_dim)), rng.integers(0, num_classes, size=n)


@pytest.fixture
def small_model():
    return make_model(drift=0.3)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE = {}


def record_acceptance(key, passed, detail):
    """Remember one criterion outcome; printed at the end of the session."""
    ACCEPTANCE[key] = (bool(passed), detail)
    print(f"[acceptance {key}] {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'} - {detail}")
