import numpy as np
import pytest

from grood.feature_io import FeatureSet
from grood.pipeline import ExperimentData
from grood.synth import simplex_etf


def small_experiment(seed=0, num_classes=3, dim=8, n_per_class=80, scale=4.0,
                     sigma=0.1, with_aux=True, with_logits=True):
    """Small clustered experiment with one far OOD set and an optional
    auxiliary OOD pool carrying logits."""
    rng = np.random.default_rng(seed)
    protos = simplex_etf(num_classes, dim, scale)
    y = np.repeat(np.arange(num_classes), n_per_class)
    X = protos[y] + rng.normal(scale=sigma, size=(y.size, dim))
    yt = np.repeat(np.arange(num_classes), 30)
    Xt = protos[yt] + rng.normal(scale=sigma, size=(yt.size, dim))
    w = np.ones(dim) / np.sqrt(dim)
    far = 2.5 * scale * w + rng.normal(scale=sigma, size=(120, dim))

    def logits_for(feats):
        d = np.sqrt(((feats[:, None, :] - protos[None, :, :]) ** 2).sum(-1))
        return -d

    aux = None
    if with_aux:
        aux_feats = 1.5 * scale * w + rng.normal(scale=3 * sigma, size=(100, dim))
        aux = FeatureSet(layer="penultimate", features=aux_feats,
                         logits=logits_for(aux_feats) if with_logits else None,
                         dataset_id="aux", dtype="f64", num_classes=num_classes)

    return ExperimentData(
        id_train=FeatureSet(layer="penultimate", features=X, labels=y,
                            dataset_id="train", dtype="f64",
                            num_classes=num_classes),
        id_test=FeatureSet(layer="penultimate", features=Xt, labels=yt,
                           dataset_id="id_test", dtype="f64",
                           num_classes=num_classes),
        ood_test={"far": FeatureSet(layer="penultimate", features=far,
                                    dataset_id="far", dtype="f64",
                                    num_classes=num_classes)},
        ood_aux=aux,
        num_classes=num_classes,
    )


@pytest.fixture
def experiment():
    return small_experiment()
