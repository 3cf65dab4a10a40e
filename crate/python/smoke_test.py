"""Smoke test for the sidsearch Python bindings.

Build first:  pip install --no-build-isolation ./crates/python
              (or `maturin develop -m crates/python/Cargo.toml` inside a virtualenv)
Then run:     python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import sidsearch_py as ss


def main():
    cfg = ss.RunConfig('{"seed": 3}', ["corpus.noise=0.1"])
    assert len(cfg.hash) == 16
    assert ss.RunConfig('{"seed": 3}', ["corpus.noise=0.1"]).hash == cfg.hash
    try:
        ss.RunConfig('{"bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    catalog = ss.Catalog.generate(7, 120, 8, 6)
    assert len(catalog) == 120
    title, brand, category, price = catalog.item(catalog.item_ids()[0])
    assert brand in title and price > 0

    index = ss.SidIndex.build(catalog, [8, 4, 4], dim=32, seed=7)
    sids = {tuple(index.sid_of(i)) for i in catalog.item_ids()}
    assert len(sids) == len(catalog), "SIDs must be unique"
    for i in catalog.item_ids()[:10]:
        assert index.decode(index.sid_of(i)) == i

    policy = ss.Policy.init(index, cfg, seed=1)
    reasoning, items = index.search(policy, "query red phone", n=5, max_reason_len=8)
    assert reasoning.startswith("<think>")
    assert len(items) == 5 and all(index.sid_of(i) is not None for i in items)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "params.bin"
        policy.save(path)
        assert ss.Policy.load(path).content_hash() == policy.content_hash()

    assert abs(ss.rank_aware_reward([1.0, 0.0, 0.0]) - 0.483766) < 1e-5
    assert abs(ss.rank_aware_reward([0.0, 1.0, 0.0]) - 0.285718) < 1e-5
    assert ss.compute_advantages([1.0, 1.0, 1.0]) == [0.0, 0.0, 0.0]
    assert abs(ss.sid_accuracy([1, 2, 0, 0], [1, 2, 3, 0]) - 0.8) < 1e-12
    assert ss.hit_rate_at([5, 9, 2], 2, 3) == 1.0
    assert abs(ss.ndcg_at([5, 9, 2], 9, 3) - 1 / math.log2(3)) < 1e-12

    print(f"ok: {len(catalog)} items, vocab {index.vocab_size()}, {policy.num_params} params")


if __name__ == "__main__":
    main()
