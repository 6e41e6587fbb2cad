import numpy as np
import pytest

from fscil.data import RunConfig, generate_gaussians
from fscil.errors import InvalidParameterError, ParseError
from fscil.runner import (
    dataset_from_config,
    run_base_training,
    run_sessions,
    stream_from_config,
)


def write_csv(path, ds, names):
    with open(path, "w") as fh:
        for row, label in zip(ds.features, ds.labels):
            fh.write(names[label] + "," + ",".join(f"{v:.12g}" for v in row) + "\n")


class TestCsvPipeline:
    def test_train_test_share_one_label_mapping(self, tmp_path):
        train, test = generate_gaussians(4, 3, 6, 4, 1.0, 0.1, seed=0)
        names = ["ant", "bee", "cat", "dog"]
        write_csv(tmp_path / "train.csv", train, names)
        # test file lists classes in a different order than the train file
        order = np.argsort(test.labels)[::-1]
        write_csv(tmp_path / "test.csv", test.subset(order), names)
        cfg = RunConfig(data_kind="csv", train_path=str(tmp_path / "train.csv"),
                        test_path=str(tmp_path / "test.csv"))
        tr, te = dataset_from_config(cfg)
        assert tr.label_names == names
        # labels line up by name, not by file order
        for c, name in enumerate(names):
            rows = te.features[te.labels == c]
            expected = test.features[test.labels == c]
            np.testing.assert_allclose(np.sort(rows, axis=0),
                                       np.sort(expected, axis=0), atol=1e-9)

    def test_unseen_test_class_rejected(self, tmp_path):
        train, test = generate_gaussians(3, 2, 4, 2, 1.0, 0.1, seed=1)
        write_csv(tmp_path / "train.csv", train, ["a", "b", "c"])
        write_csv(tmp_path / "test.csv", test, ["a", "b", "x"])
        cfg = RunConfig(data_kind="csv", train_path=str(tmp_path / "train.csv"),
                        test_path=str(tmp_path / "test.csv"))
        with pytest.raises(ParseError):
            dataset_from_config(cfg)

    def test_csv_stream_builds_and_trains(self, tmp_path):
        train, test = generate_gaussians(6, 4, 10, 5, 1.0, 0.2, seed=2)
        names = [f"c{i}" for i in range(6)]
        write_csv(tmp_path / "train.csv", train, names)
        write_csv(tmp_path / "test.csv", test, names)
        cfg = RunConfig(data_kind="csv", train_path=str(tmp_path / "train.csv"),
                        test_path=str(tmp_path / "test.csv"),
                        num_base=4, way=1, shot=3, sessions=2, epochs=5,
                        dim=4, num_virtual=2)
        run = run_base_training(cfg)
        metrics, _ = run_sessions(run.state, run.stream, cfg, "fact")
        assert len(metrics.acc) == 3


class TestRunSessions:
    def test_unknown_method(self):
        cfg = RunConfig(epochs=1)
        run = run_base_training(cfg)
        with pytest.raises(InvalidParameterError):
            run_sessions(run.state, run.stream, cfg, "osmosis")

    def test_kd_method_full_walk(self):
        cfg = RunConfig(epochs=30, kd_steps=20)
        run = run_base_training(cfg)
        metrics, final_state = run_sessions(run.state, run.stream, cfg, "kd")
        assert len(metrics.acc) == cfg.sessions + 1
        assert final_state.head.num_known == cfg.num_base + cfg.way * cfg.sessions

    def test_stream_rebuild_is_stable(self):
        cfg = RunConfig()
        train, test = dataset_from_config(cfg)
        a = stream_from_config(cfg, train, test)
        b = stream_from_config(cfg, train, test)
        assert a.base_classes == b.base_classes
        np.testing.assert_array_equal(a.sessions[0].train.features,
                                      b.sessions[0].train.features)
