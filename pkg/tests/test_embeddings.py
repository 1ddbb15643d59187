import numpy as np
import pytest

from amdtl import autodiff as ad
from amdtl.autodiff import Tensor
from amdtl.embeddings import AutoencoderNets, EmbeddingTable, domain_embedding, train_autoencoder
from amdtl.models import DomainEmbedding
from amdtl.objectives import LossValue


@pytest.fixture
def nets():
    return AutoencoderNets(2, 3, (8,))


def test_zero_learning_rate_leaves_params_and_loss_flat(nets, rng):
    x = rng.normal(size=(40, 2))
    p0 = nets.init(0)
    trace = train_autoencoder(x, nets, p0, epochs=4, lr=0.0, seed=1, batch_size=40)
    # batches are reshuffled each epoch, so only summation order differs
    np.testing.assert_allclose(trace.losses, trace.losses[0], rtol=1e-13)
    for k in p0:
        assert np.array_equal(trace.params[k].data, p0[k].data)


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_loss_decreases_on_one_dimensional_data(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(200, 1))
    x = np.hstack([t, 0.5 * t])
    nets = AutoencoderNets(2, 2, (8,))
    trace = train_autoencoder(x, nets, nets.init(seed), epochs=50, lr=1e-2, seed=seed, batch_size=20)
    assert trace.losses[-1] < trace.losses[0]


def test_training_is_deterministic(nets, rng):
    x = rng.normal(size=(30, 2))
    a = train_autoencoder(x, nets, nets.init(3), 3, 0.01, seed=9, batch_size=8)
    b = train_autoencoder(x, nets, nets.init(3), 3, 0.01, seed=9, batch_size=8)
    assert a.losses == b.losses
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_single_sample_embedding_is_its_code(nets, rng):
    p = nets.init(0)
    x = rng.normal(size=(1, 2))
    e = domain_embedding(nets, p, x, "one")
    np.testing.assert_array_equal(e.vector, nets.encode(p, Tensor(x)).data[0])


def test_embedding_ignores_row_order_and_duplication(nets, rng):
    p = nets.init(1)
    x = rng.normal(size=(17, 2))
    e = domain_embedding(nets, p, x).vector
    assert np.array_equal(e, domain_embedding(nets, p, x[rng.permutation(17)]).vector)
    assert np.array_equal(e, domain_embedding(nets, p, np.vstack([x, x])).vector)


def test_separated_domains_are_further_apart_than_resamples():
    nets = AutoencoderNets(2, 4, (8,))
    p = nets.init(2)
    rng = np.random.default_rng(0)
    a1, a2 = rng.normal(size=(500, 2)), rng.normal(size=(500, 2))
    b = rng.normal(size=(500, 2)) + np.array([3.0, -3.0])
    ea1, ea2, eb = (domain_embedding(nets, p, d).vector for d in (a1, a2, b))
    assert np.linalg.norm(ea1 - eb) > np.linalg.norm(ea1 - ea2)


def test_zero_task_weight_matches_pure_reconstruction(nets, rng):
    x = rng.normal(size=(12, 2))
    target = rng.normal(size=(1, 3))

    def task(params, xb):
        d = ad.sub(nets.mean_code(params, xb), Tensor(target))
        return LossValue(ad.reduce_sum(ad.mul(d, d)))

    plain = train_autoencoder(x, nets, nets.init(0), 2, 0.01, seed=0, batch_size=6)
    joint = train_autoencoder(x, nets, nets.init(0), 2, 0.01, seed=0, batch_size=6, lambda_e=0.0, task_term=task)
    assert plain.losses == joint.losses
    weighted = train_autoencoder(x, nets, nets.init(0), 2, 0.01, seed=0, batch_size=6, lambda_e=1.0, task_term=task)
    assert weighted.losses != plain.losses


def test_training_argument_validation(nets):
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((0, 2)), nets, nets.init(0), 1, 0.1, 0)
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((3, 2)), nets, nets.init(0), 0, 0.1, 0)
    with pytest.raises(ValueError):
        train_autoencoder(np.zeros((3, 2)), nets, nets.init(0), 1, 0.1, 0, lambda_e=0.5)
    with pytest.raises(ValueError):
        domain_embedding(nets, nets.init(0), np.zeros((0, 2)))


def test_table_roundtrip_and_dimension_check():
    table = EmbeddingTable(2, "joint")
    table.add(DomainEmbedding(np.array([0.1, 1 / 3]), "source"))
    table.add(DomainEmbedding(np.array([-2.0, 5e-17]), "target"))
    back = EmbeddingTable.from_dict(table.to_dict())
    assert back.provenance == "joint"
    assert np.array_equal(back["target"].vector, table["target"].vector)
    with pytest.raises(ValueError):
        table.add(DomainEmbedding(np.zeros(3), "bad"))
    with pytest.raises(KeyError, match="nowhere"):
        table["nowhere"]
    zeros = EmbeddingTable.zeros(4, ["a", "b"])
    assert zeros.provenance == "none" and not zeros["b"].vector.any()
