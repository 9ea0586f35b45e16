import numpy as np
import pytest

from cagul_lab import baselines, vlm
from cagul_lab.autodiff import Tensor
from conftest import tiny_config


def test_config_defaults_and_validation():
    assert baselines.BaselineConfig("ga").lr == 1e-2
    assert baselines.BaselineConfig("po_gd", lr=0.5).lr == 0.5
    with pytest.raises(ValueError):
        baselines.BaselineConfig("sgd")
    with pytest.raises(ValueError):
        baselines.BaselineConfig("ga", lr=-1.0)


@pytest.mark.parametrize("history,expected", [
    ([], False),
    ([{"retain_nll": 0.001, "forget_em": 1.0}, {"retain_nll": 1.2, "forget_em": 0.8}], False),
    ([{"retain_nll": 0.001, "forget_em": 1.0}, {"retain_nll": 1.6, "forget_em": 0.8}], True),
    ([{"retain_nll": 2.0, "forget_em": 1.0}, {"retain_nll": 2.9, "forget_em": 0.8}], False),
    ([{"retain_nll": 2.0, "forget_em": 1.0}, {"retain_nll": 3.1, "forget_em": 0.8}], True),
    ([{"retain_nll": 0.5, "forget_em": 1.0}, {"retain_nll": 0.5, "forget_em": 0.05}], True),
])
def test_early_stop_rules(history, expected):
    assert baselines.early_stop(history) is expected


def test_kl_term_vanishes_for_identical_logits_and_is_positive_otherwise(rng):
    cfg = tiny_config()
    batch = vlm.make_batch([[5, 6], [7]], [[8], [9, 10]], cfg)
    B, T = batch.ids.shape
    ref = rng.normal(size=(B, T, cfg.vocab_size)).astype(np.float32)
    w = np.array([0.5, 0.5])
    assert float(baselines.kl_term(Tensor(ref), ref, batch, w).data) == pytest.approx(0.0, abs=1e-5)
    other = ref + rng.normal(size=ref.shape).astype(np.float32)
    assert float(baselines.kl_term(Tensor(other), ref, batch, w).data) > 0.01


def _toy(rng):
    cfg = tiny_config(vocab_size=14)
    params = vlm.init_vlm(cfg, 0)
    imgs = [rng.random((16, 16)).astype(np.float32) for _ in range(4)]
    ex = [vlm.TrainExample(imgs[i], [5, 6 + i], [10 + i]) for i in range(4)]
    params, _ = vlm.finetune(params, ex, lr=3e-2, batch_size=4, epochs=60, seed=0)
    return params, ex[:1], ex[1:]


@pytest.mark.parametrize("method", ["ga", "ga_gd", "ga_kl", "po_gd"])
def test_each_method_runs_and_leaves_the_base_alone(method, rng):
    base, forget, retain = _toy(rng)
    before = base.digest()
    conf = baselines.BaselineConfig(method, epochs=3)
    out, log = baselines.unlearn_finetune(base, forget, retain, conf, refusal_ids=[3])
    assert base.digest() == before and out.digest() != before
    assert len(log.epochs) == 3 and log.trainable_params == base.count(trainable_only=True)


def test_gradient_ascent_raises_forget_loss(rng):
    base, forget, retain = _toy(rng)
    out, _ = baselines.unlearn_finetune(base, forget, retain, baselines.BaselineConfig("ga", epochs=5))
    assert float(baselines._nll(out, forget).data) > float(baselines._nll(base, forget).data) + 0.5


def test_monitor_drives_early_stop(rng):
    base, forget, retain = _toy(rng)
    calls = []

    def monitor(_):
        calls.append(1)
        return {"retain_nll": 0.0, "forget_em": 1.0 if len(calls) == 1 else 0.0}
    _, log = baselines.unlearn_finetune(base, forget, retain, baselines.BaselineConfig("ga", epochs=5),
                                        monitor=monitor)
    assert log.stopped_early and len(log.epochs) == 1


def test_po_gd_requires_refusal_and_retrain_is_separate(rng):
    base, forget, retain = _toy(rng)
    with pytest.raises(ValueError):
        baselines.unlearn_finetune(base, forget, retain, baselines.BaselineConfig("po_gd", epochs=1))
    with pytest.raises(ValueError):
        baselines.unlearn_finetune(base, forget, retain, baselines.BaselineConfig("retrain"))
    _, log = baselines.retrain(base, retain, epochs=2)
    assert len(log.epochs) == 2
