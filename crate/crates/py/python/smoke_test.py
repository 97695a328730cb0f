"""End-to-end check of the trajsim_py extension on a small synthetic dataset.

Build and install first:  maturin develop --release  (from crates/py)
Then run:                 python python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

import trajsim_py as ts


def check(cond, what):
    if not cond:
        sys.exit(f"FAIL: {what}")
    print(f"ok  {what}")


def main():
    a = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]
    b = [(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)]
    check(math.isclose(ts.discrete_frechet(a, b), 1.0), "frechet of parallel lines")
    check(math.isclose(ts.hausdorff(a, b), 1.0), "hausdorff of parallel lines")
    try:
        ts.discrete_frechet([], b)
        check(False, "empty trajectory rejected")
    except ValueError:
        check(True, "empty trajectory rejected")

    trajs = ts.synthetic_clusters(seed=7, clusters=3, per_cluster=20, points=60)
    check(len(trajs) == 60, "synthetic dataset size")

    cfg = ts.Config()
    cfg.epochs = 3
    cfg.steps_per_epoch = 20
    cfg.set_dims(16, 8)

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        path = tmp / "trajs.jsonl"
        ts.write_canonical(str(path), trajs)
        parsed = ts.parse_dataset(str(path), "canonical_jsonl")
        check(len(parsed) == len(trajs), "canonical jsonl round trip")

        gridded = ts.preprocess(parsed, cfg)
        ids = [g[0] for g in gridded]
        raw = ts.distance_matrix([g[1] for g in gridded], "frechet")
        d = raw.normalize()
        rows_ok = all(abs(sum(r) - (d.n - 1)) < 1e-9 for r in d.rows())
        check(rows_ok, "normalized rows sum to n - 1")

        graph = ts.build_graph(d, ids, cfg)
        check(len(graph.edge_counts()) == cfg.layers, "graph has one band per layer")

        model = ts.train(graph, d, cfg)
        check(len(model.loss_history) == 3, "one loss value per epoch")
        check(all(math.isfinite(x) for x in model.loss_history), "finite losses")

        emb = model.embeddings()
        check(len(emb) == 60 and emb.dim == 8, "embedding shape")
        hits = emb.search(ids[0], 5)
        check(len(hits) == 5 and ids[0] not in hits, "search excludes the query")

        emb.save(str(tmp / "e.tse"))
        again = ts.Embeddings.load(str(tmp / "e.tse"))
        check(again.vector(ids[3]) == emb.vector(ids[3]), "embedding file round trip")

        report = emb.evaluate(raw)
        check(set(report) >= {"HR@10", "HR@50", "R10@50"}, "evaluation report keys")
        print(report)

        try:
            ts.Embeddings.load(str(tmp / "missing.tse"))
            check(False, "missing file raises OSError")
        except OSError:
            check(True, "missing file raises OSError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
