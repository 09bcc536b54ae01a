"""Smoke test for the ewun_py extension module.

Build and install first, for example:

    pip install maturin
    cd crates/python && maturin build --release -o /tmp/wheels
    pip install /tmp/wheels/ewun_py-*.whl
    python python/smoke_test.py
"""

import math
import tempfile

import ewun_py as ew


def softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def kl(gt, sim):
    p, q = softmax(gt), softmax(sim)
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    assert ew.normalize_surface("  Acme   CORP. ") == "acme corp."
    assert ew.edit_distance("kitten", "sitting") == 3

    gt, sim = [1.0, 0.0, 1.0, 0.0], [0.9, 0.7, 0.2, 0.1]
    assert close(ew.kl_edge_loss(gt, sim), kl(gt, sim))
    assert all(close(a, b) for a, b in zip(ew.softmax(sim), softmax(sim)))
    assert ew.similarity_weights([2.0, 1.0, -1.0]) == [1.0, 0.5, -0.5]
    assert ew.similarity_weights([-2.0, -1.0]) == [-2.0, -1.0]
    assert ew.top_k_indices([0.5, 0.9, 0.5, 0.1], 3) == [1, 0, 2]

    dictionary, train, test = ew.synthetic_corpus(20, 4, seed=7)
    assert len(dictionary) == 20 and train and test
    encoder = ew.Encoder.toy(dim=32, seed=1)
    assert encoder.kind == "toy-trainable" and encoder.dim == 32
    vectors = encoder.encode(["acme corp.", "acme corporation"])
    assert len(vectors) == 2 and len(vectors[0]) == 32

    with tempfile.TemporaryDirectory() as out:
        run = ew.train(
            encoder, dictionary, train, test, k=5, batch_size=8, epochs=3,
            learning_rate=1e-2, seed=3, out_dir=out,
        )
        assert [m["epoch"] for m in run["history"]] == [1, 2, 3]
        best = max(m["top1_accuracy"] for m in run["history"])
        assert run["best_top1_accuracy"] == best
        restored = ew.Encoder.from_checkpoint(f"{out}/last")
        assert restored.parameter_checksum() == encoder.parameter_checksum()

    ranked = ew.normalize(test[0][0], dictionary, encoder, k=3)
    assert len(ranked) == 3
    assert [r[2] for r in ranked] == sorted((r[2] for r in ranked), reverse=True)

    score, matched = ew.classify_pair("acme corp.", "acme corp.", encoder, 0.5)
    assert close(score, 1.0, 1e-9) and matched
    pairs = [(a, b, True) for (a, _), (b, _) in zip(train[::2], train[1::2])]
    pairs += [(train[0][0], d[0], False) for d in dictionary.entries()[5:10]]
    threshold, f1, _ = ew.calibrate_threshold(pairs, encoder)
    assert 0.0 <= f1 <= 1.0 and math.isfinite(threshold)

    try:
        ew.train(encoder, dictionary, train, test, k=0)
    except ValueError:
        pass
    else:
        raise AssertionError("k=0 was accepted")

    print("smoke test passed:", run["history"][-1])


if __name__ == "__main__":
    main()
