"""Smoke test for the `rpt` extension module.

Build and run:

    cargo build --release -p rpt-python --features extension-module
    cp target/release/librpt.so python/rpt.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import rpt  # noqa: E402

SMALL = {
    "model": {"d": 16, "n_heads": 2, "head_dim": 8, "n_layers": 2, "window": 32, "stride": 16},
}


def main():
    doc = rpt.Document.from_text("hello", "the quick brown fox jumps over the lazy dog")
    assert len(doc) == 43
    assert len(doc.chunks(8)) == 5

    train = rpt.synthetic_corpus("tr", 4, seed=1)
    test = rpt.synthetic_corpus("te", 2, seed=2)
    data = rpt.Dataset(train)
    held_out = rpt.Dataset(test, reference=train)
    records = data.records()
    assert records and all(r["query_index"] >= 3 for r in records)
    assert data.max_target_at_k(1) <= data.max_target_at_k(20)

    trainer = rpt.Trainer("rpt", steps=20, seed=0, overrides=SMALL)
    before = trainer.evaluate(held_out)["perplexity"]
    log = trainer.train(data, 20)
    assert len(log) == 20 and trainer.step == 20
    assert all(math.isfinite(s["lm_loss"]) for s in log)
    after = trainer.evaluate(held_out)
    assert after["perplexity"] < before, (before, after["perplexity"])
    assert any(s["retriever"] == "model" for s in after["retrieval"])

    neighbors = trainer.retrieve(test[0].tokens)
    assert all(len(n) <= 2 for n in neighbors)
    assert all(j + 2 <= i for i, n in enumerate(neighbors) for j in n)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.bin")
        trainer.save(path)
        again = rpt.Trainer.load(path)
        assert again.step == 20
        assert again.perplexity(test[0].tokens) == trainer.perplexity(test[0].tokens)

    try:
        rpt.Trainer("rpt", overrides={"model": {"width": 3}})
    except ValueError as e:
        assert "width" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print(f"ok: perplexity {before:.2f} -> {after['perplexity']:.2f}")


if __name__ == "__main__":
    main()
