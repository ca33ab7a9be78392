"""Smoke test for the pyctxrank extension module.

Build and install first:

    cd crates/python && maturin develop --release   # or: maturin build + pip install
    python python/smoke_test.py
"""

import math
import tempfile

import pyctxrank as cr


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def main():
    # Features and metrics.
    a = cr.Item("a", unit([1.0, 0.0]), 0, 0.9)
    b = cr.Item("b", unit([1.0, 1.0]), 1, 0.8)
    f = cr.extract_contextual(b, [a], num_topics=2, feed_length=2)
    assert len(f) == 10
    assert abs(f[0] - 1 / math.sqrt(2)) < 1e-12, f
    assert cr.calibration([0.5, 0.5], [1, 0]) == 1.0
    assert abs(cr.normalized_entropy([0.25] * 4, [1, 0, 0, 0]) - 1.0) < 1e-9
    buckets = cr.calibration_by_bucket([0.1, 0.1, 0.9], [1.0, 0.0, 1.0], [1, 0, 1])
    assert sum(c for _, _, c, _ in buckets) == 3

    # Simulated world, trained models, re-ranking.
    with tempfile.TemporaryDirectory() as root:
        overrides = [
            f"paths.corpus={root}/corpus.jsonl",
            f"paths.users={root}/users.jsonl",
            f"paths.logs={root}/logs",
            f"paths.models={root}/models",
            f"paths.reports={root}/reports",
            "world.num_days=3",
            "world.sessions_per_day=20",
            "eval.holdout_days=1",
            "eval.test_sessions=50",
        ]
        sim = cr.run_stage("simulate", overrides=overrides)
        assert sim["train_impressions"] == 3 * 20 * 20, sim
        cr.run_stage("train-baseline", overrides=overrides)
        trained = cr.run_stage("train-contextual", overrides=overrides)
        report = cr.run_stage("eval", overrides=overrides)
        assert report["ne"]["contextual"]["ne"] > 0

        model = cr.Model.load(trained["model_path"])
        assert model.feature_mode == "contextual"
        assert model.input_dim == 2 + model.num_topics + 10
        probs = model.forward([0.0] * model.input_dim)
        assert len(probs) == model.task_count and all(0 < p < 1 for p in probs)

        world = cr.World('{"num_users": 20, "num_items": 100, "sessions_per_day": 2}')
        user = world.users[0]
        items = [cr.Item(i.id, i.embedding, i.topic, 1.0 - 0.01 * k) for k, i in enumerate(world.items[:12])]
        ids, scores = cr.rerank_feed(model, user, items, window=4)
        assert sorted(ids) == sorted(i.id for i in items) and len(scores) == 12

        session = cr.Session(user, items)
        paged = []
        while not session.done:
            paged += session.next_page(model, 5, window=4)[0]
        assert paged == ids, (paged, ids)

        assert cr.mmr_rerank(user, items, 1.0) == [i.id for i in items]
        day = world.simulate_days(0, 1)
        assert len(day) == 2 * 20 and set(day[0]) >= {"labels", "contextual", "similarity_score"}

    print("pyctxrank smoke test passed")


if __name__ == "__main__":
    main()
