"""End-to-end smoke test of the Python bindings.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import json
import math
import os
import tempfile

import locpred


def main():
    with tempfile.TemporaryDirectory() as tmp:
        csv_path = os.path.join(tmp, "synthetic.csv")
        n_points = locpred.generate(csv_path, users=40, minutes=480, seed=3)
        assert n_points == 40 * 480, n_points

        data = locpred.Dataset.from_csv(csv_path)
        assert (data.m, data.k) == (10, 8)
        assert len(data) > 0 and len(data.users()) == 40
        s = data.sample(0)
        assert len(s["sequence"]["deltas"]) == data.k
        assert len(s["region"]["values"]) == data.m * data.m

        path = os.path.join(tmp, "data.bin")
        data.save(path)
        again = locpred.Dataset.load(path)
        assert again.labels() == data.labels()

        train, val, test = data.split(seed=1)
        assert len(train) + len(val) + len(test) == len(data)

        model = locpred.Model(data.m, data.k, variant="fglp", seed=0)
        history = model.fit(train, val, epochs=3)
        assert len(history["epochs"]) == 3
        report = model.evaluate(test)
        assert 0.0 <= report["accuracy"] <= 1.0

        ho = locpred.evaluate_ho(test)
        assert ho["loss"] == "NA"

        cell, probs = model.predict(test, 0)
        assert len(probs) == data.m * data.m and probs[cell] == max(probs)
        assert math.isclose(sum(probs), 1.0, abs_tol=1e-9)
        rows = model.predict_proba(test)
        assert len(rows) == len(test)
        preds = [max(range(len(r)), key=r.__getitem__) for r in rows]
        assert math.isclose(locpred.accuracy(test.labels(), preds), report["accuracy"], abs_tol=1e-12)
        assert math.isclose(
            locpred.weighted_f1(test.labels(), preds, data.m * data.m), report["weighted_f1"], abs_tol=1e-12
        )

        ckpt = os.path.join(tmp, "model.ckpt")
        model.save(ckpt)
        loaded = locpred.Model.load(ckpt)
        assert loaded.predict_proba(test) == rows

        fl_model, fl = locpred.federated(data, rounds=2, clients_per_round=3, jobs=2)
        assert len(fl["rounds"]) == 2 and fl["audit"]["violations"] == 0
        assert fl_model.n_parameters == model.n_parameters

        try:
            locpred.Model(data.m, data.k, variant="rnn")
        except ValueError:
            pass
        else:
            raise AssertionError("unknown variant accepted")
        try:
            locpred.Dataset.load(os.path.join(tmp, "missing.bin"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")

        print(json.dumps({"samples": len(data), "test_accuracy": report["accuracy"], "ho_accuracy": ho["accuracy"]}))
        print("smoke test passed")


if __name__ == "__main__":
    main()
