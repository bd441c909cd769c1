import numpy as np
import pytest

from mmxeval.data import Case, DatasetManifest, FeatureMaskSet, MultiModalImage
from mmxeval.oracle import LinearOracle, T1cShapeOracle
from mmxeval.synthgen import generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """20 synthetic cases at the default size, with background."""
    return generate_dataset(20, seed=7)


@pytest.fixture(scope="session")
def t1c_oracle():
    return T1cShapeOracle()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_case(image: np.ndarray, masks=None, label=0, case_id="t0") -> Case:
    return Case(
        id=case_id,
        image=MultiModalImage(np.asarray(image, dtype=np.float32)),
        label=label,
        masks=None if masks is None else FeatureMaskSet(np.asarray(masks)),
    )


def tiny_manifest(cases, num_classes=2, modalities=None) -> DatasetManifest:
    if modalities is None:
        m = cases[0].image.num_modalities
        modalities = tuple(f"M{i}" for i in range(m))
    return DatasetManifest(modalities=tuple(modalities), num_classes=num_classes,
                           cases=tuple(cases))


def linear_env(g_count=4, spatial=(4, 4), seed=5, scale=0.25):
    """A linear-link oracle plus an input whose scores stay inside (0, 1).

    Weights and input are scaled so that every coalition score w.x(z) + 0.5
    lies in (0.5, 1), which pins the predicted class to 1 and keeps score
    differences exactly linear.
    """
    rng = np.random.default_rng(seed)
    shape = (g_count,) + spatial
    weights = rng.uniform(0.0, 1.0, shape)
    image = rng.uniform(0.0, 1.0, shape).astype(np.float32)
    total = float((weights * image.astype(np.float64)).sum())
    weights *= scale / total  # w . x == scale, per-coalition scores in (0.5, 1)
    oracle = LinearOracle(weights, bias=0.5, link="identity")
    return oracle, weights, image
