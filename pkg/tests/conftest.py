import pytest

from sfada import config as C

SMALL_CONFIG = {
    "schema_version": 1,
    "source_data": {"n": 400, "d_in": 8, "class_scale": 0.7},
    "target_data": {"n": 300, "d_in": 8, "class_scale": 0.7, "shift_angle": 0.8, "shift_offset": 1.0,
                    "outlier_fraction": 0.05},
    "source": {"epochs_model": 10, "epochs_generator": 100, "hidden": [16], "feature_dim": 8, "noise_dim": 4,
               "embed_dim": 4, "generator_hidden": [16]},
    "active": {"budget_fraction": 0.1, "rounds": 3},
    "lpda": {"epochs": 6, "batch_labeled": 16, "batch_unlabeled": 16},
}


@pytest.fixture
def small_config() -> C.RunConfig:
    return C.from_dict(SMALL_CONFIG)
