"""Smoke test for the m2unet_py extension.

Build and install it first:

    pip install -e crates/python --no-build-isolation
    python python/smoke_test.py
"""

import math
import os
import tempfile

import m2unet_py as m


def check_tensor_and_metrics():
    y = m.Tensor([4], [1.0, 1.0, 0.0, 0.0])
    p = m.Tensor([4], [1.0, 0.0, 1.0, 0.0])
    assert y.shape == [4] and len(y) == 4
    assert math.isclose(m.dice(y, p), 0.5)
    assert math.isclose(m.iou(y, p), 1.0 / 3.0)
    assert math.isclose(m.mae(y, p), 0.5)
    loss = m.jaccard_loss(m.Tensor([1], [1.0]), m.Tensor([1], [0.0]))
    assert abs(loss - 0.4117647) < 1e-6, loss
    try:
        m.Tensor([3], [1.0])
    except ValueError as e:
        assert "dimension" in str(e)
    else:
        raise AssertionError("shape mismatch was accepted")


def check_model():
    cfg = m.ModelConfig.preset("tiny").with_image_size(96, 64)
    model = m.Model(cfg, seed=1)
    x = m.Tensor.zeros([1, 64, 96, 3])
    shapes = model.forward_shapes(x)
    assert shapes[:4] == [[1, 16, 24, 8], [1, 8, 12, 16], [1, 4, 6, 24], [1, 2, 3, 32]], shapes
    assert shapes[5] == [1, 64, 96, 1]
    probs = model.predict(x).tolist()
    assert all(0.0 <= v <= 1.0 for v in probs)
    counts = [m.Model(m.ModelConfig().with_ablation(a)).param_count() for a in m.ModelConfig.ablations()]
    assert counts[0] == min(counts) and counts[-1] == max(counts), counts


def check_training(tmp):
    text = "\n".join([
        "model.preset = gradcheck",
        "train.target_size = 32",
        "train.epochs = 2",
        "train.batch_size = 2",
        "train.synth_n = 4",
        "train.lr_max = 0.003",
    ])
    t = m.Trainer(text)
    assert t.total_steps == 4
    step, epoch, loss, lr = t.step()
    assert (step, epoch) == (0, 1) and math.isfinite(loss) and lr == 0.003
    ckpt = os.path.join(tmp, "run.ckpt")
    t.save(ckpt)
    resumed = m.Trainer.resume(text, ckpt)
    assert resumed.step_count == 1
    assert resumed.step() == t.step()
    dice, iou, mae = t.evaluate()
    assert 0.0 <= iou <= dice <= 1.0 and 0.0 <= mae <= 1.0

    data = os.path.join(tmp, "ds")
    m.synth_dataset(data, n=2, size=32, seed=5)
    table = m.evaluate(ckpt, data)
    assert table.splitlines()[0] == "id\tdice\tiou\tmae" and len(table.splitlines()) == 4
    out = os.path.join(tmp, "p.pgm")
    m.Model.load(ckpt).predict_file(os.path.join(data, "images", "synth_0000.ppm"), out)
    assert open(out, "rb").read(2) == b"P5"


def check_gradients():
    for name in ["engine/conv2d", "blocks/mu", "loss/jaccard"]:
        err, tol, ok = m.gradcheck_run(name, 3)
        assert ok, (name, err, tol)


def main():
    check_tensor_and_metrics()
    check_model()
    with tempfile.TemporaryDirectory() as tmp:
        check_training(tmp)
    check_gradients()
    print("python smoke test passed")


if __name__ == "__main__":
    main()
