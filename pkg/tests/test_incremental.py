import numpy as np
import pytest

from fscil.data import LabeledDataset
from fscil.errors import (
    DuplicateLabelError,
    InvalidParameterError,
    NoVirtualPrototypesError,
)
from fscil.incremental import (
    InferConfig,
    SessionState,
    class_prototypes,
    expand_head,
    finetune_session,
    infer_fact,
    infer_protonet,
    initial_state,
    kd_loss,
    kd_session,
)
from fscil.network import AffineLayer, CosineHead, EmbeddingNet
from fscil.numerics import Rng, l2_normalize


def identity_net(dim: int) -> EmbeddingNet:
    return EmbeddingNet([AffineLayer(np.eye(dim), np.zeros(dim))],
                        [AffineLayer(np.eye(dim), np.zeros(dim))])


def random_state(num_known=3, num_virtual=2, dim=4, seed=0) -> SessionState:
    net = EmbeddingNet.build(dim, 8, dim, Rng(seed).derive("net"))
    head = CosineHead.init_random(num_known, num_virtual, dim, Rng(seed).derive("head"))
    return initial_state(net, head, list(range(num_known)))


class TestClassPrototypes:
    def test_mean_of_copies(self):
        net = identity_net(2)
        feats = np.array([[3.0, 4.0]] * 5)
        ds = LabeledDataset(feats, np.zeros(5, dtype=np.int64))
        protos = class_prototypes(net, ds)
        np.testing.assert_allclose(protos[0], [0.6, 0.8], atol=1e-15)

    def test_two_instance_mean_direction(self):
        net = identity_net(2)
        ds = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0]]),
                            np.zeros(2, dtype=np.int64))
        protos = class_prototypes(net, ds)
        np.testing.assert_allclose(protos[0], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)

    def test_other_classes_excluded(self):
        net = identity_net(2)
        ds = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0], [-5.0, 0.0]]),
                            np.array([0, 0, 1], dtype=np.int64))
        protos = class_prototypes(net, ds)
        np.testing.assert_allclose(protos[0], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)
        np.testing.assert_allclose(protos[1], [-1.0, 0.0], atol=1e-15)

    def test_permutation_invariant_bitwise(self):
        net = EmbeddingNet.build(3, 6, 4, Rng(2))
        gen = np.random.default_rng(3)
        feats = gen.normal(size=(30, 3))
        labels = gen.integers(0, 3, size=30).astype(np.int64)
        ds = LabeledDataset(feats, labels)
        perm = gen.permutation(30)
        shuffled = LabeledDataset(feats[perm], labels[perm])
        a = class_prototypes(net, ds)
        b = class_prototypes(net, shuffled)
        for c in a:
            np.testing.assert_array_equal(a[c], b[c])

    def test_missing_class_rejected(self):
        from fscil.errors import EmptyClassError

        net = identity_net(2)
        ds = LabeledDataset(np.array([[1.0, 0.0]]), np.array([0], dtype=np.int64))
        with pytest.raises(EmptyClassError):
            class_prototypes(net, ds, classes=[0, 1])


class TestExpandHead:
    def test_empty_map_keeps_head(self):
        state = random_state()
        out = expand_head(state, {})
        assert out.head.num_known == state.head.num_known
        assert out.registry == state.registry
        assert out.session_index == state.session_index + 1

    def test_sixty_plus_five(self):
        state = random_state(num_known=60, dim=8, seed=4)
        protos = {100 + i: l2_normalize(np.random.default_rng(i).normal(size=8))
                  for i in range(5)}
        out = expand_head(state, protos)
        assert out.head.num_known == 65
        assert out.head.num_virtual == state.head.num_virtual
        assert out.head.num_base == 60

    def test_duplicate_label(self):
        state = random_state()
        with pytest.raises(DuplicateLabelError):
            expand_head(state, {0: np.ones(4)})

    def test_registry_rows_match_prototypes(self):
        state = random_state(num_known=2, dim=3, seed=5)
        p7 = l2_normalize([1.0, 2.0, 3.0])
        p9 = l2_normalize([-1.0, 0.5, 0.0])
        out = expand_head(state, {9: p9, 7: p7})
        np.testing.assert_array_equal(out.head.known[out.registry[7]], p7)
        np.testing.assert_array_equal(out.head.known[out.registry[9]], p9)


def hand_state() -> SessionState:
    # two orthogonal known classes, two hand-placed unit virtual prototypes
    head = CosineHead(np.array([[1.0, 0.0], [0.0, 1.0]]),
                      np.array([[-0.6, 0.8], [0.8, -0.6]]), scale=16.0, num_base=2)
    return initial_state(identity_net(2), head, [0, 1])


class TestInferFact:
    def test_probability_vector(self):
        state = random_state(num_known=4, num_virtual=3, dim=5, seed=6)
        cfg = InferConfig()
        gen = np.random.default_rng(7)
        for _ in range(50):
            p = infer_fact(state, cfg, gen.normal(size=5))
            assert np.all(p >= 0)
            assert abs(p.sum() - 1.0) < 1e-10

    def test_single_virtual_degenerate(self):
        head = CosineHead(np.array([[1.0, 0.0], [0.0, 1.0]]),
                          np.array([[0.6, 0.8]]), num_base=2)
        state = initial_state(identity_net(2), head, [0, 1])
        cfg = InferConfig(eta=0.5, prior="gaussian", tau=1.0)
        x = np.array([0.6, 0.8])
        p = infer_fact(state, cfg, x)
        # independent scalar evaluation for the single-v row
        phi = x / np.linalg.norm(x)
        pv = np.array([0.6, 0.8])
        scores = [0.5 * np.exp(w @ (phi + pv)) + 0.5 * np.exp(pv @ (phi + w))
                  for w in (np.array([1.0, 0.0]), np.array([0.0, 1.0]))]
        expected = np.array(scores) / sum(scores)
        np.testing.assert_allclose(p, expected, atol=1e-12)

    def test_frozen_hand_geometry_gaussian(self):
        # values precomputed by a direct scalar transcription of the
        # total-probability mixture
        p = infer_fact(hand_state(), InferConfig(eta=0.5, prior="gaussian", tau=1.0),
                       np.array([0.6, 0.8]))
        np.testing.assert_allclose(
            p, [0.4379617846693042, 0.5620382153306958], atol=1e-12)

    def test_frozen_hand_geometry_uniform(self):
        p = infer_fact(hand_state(), InferConfig(eta=0.5, prior="uniform", tau=1.0),
                       np.array([0.6, 0.8]))
        np.testing.assert_allclose(
            p, [0.468480420317289, 0.531519579682711], atol=1e-12)

    def test_no_virtual_prototypes(self):
        head = CosineHead(np.array([[1.0, 0.0]]), np.zeros((0, 2)), num_base=1)
        state = initial_state(identity_net(2), head, [0])
        with pytest.raises(NoVirtualPrototypesError):
            infer_fact(state, InferConfig(), np.array([1.0, 1.0]))

    def test_invalid_config(self):
        with pytest.raises(InvalidParameterError):
            InferConfig(eta=1.5)
        with pytest.raises(InvalidParameterError):
            InferConfig(prior="cauchy")
        with pytest.raises(InvalidParameterError):
            InferConfig(tau=0.0)


class TestProtonet:
    def test_frozen_hand_geometry(self):
        p = infer_protonet(hand_state(), np.array([0.6, 0.8]))
        np.testing.assert_allclose(
            p, [0.45016600268752205, 0.549833997312478], atol=1e-12)

    def test_matching_prototype_dominates_at_high_tau(self):
        head = CosineHead(np.array([[1.0, 0.0], [0.0, 1.0]]), np.ones((1, 2)),
                          num_base=2)
        state = initial_state(identity_net(2), head, [0, 1])
        p = infer_protonet(state, np.array([1.0, 0.0]), InferConfig(tau=50.0))
        assert p[0] > 0.999999

    def test_identical_prototypes_uniform(self):
        head = CosineHead(np.array([[1.0, 1.0]] * 3), np.ones((1, 2)), num_base=3)
        state = initial_state(identity_net(2), head, [0, 1, 2])
        p = infer_protonet(state, np.array([0.3, -0.9]))
        np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-12)

    def test_equal_angles_split_evenly(self):
        head = CosineHead(np.array([[1.0, 1.0], [1.0, -1.0]]), np.ones((1, 2)),
                          num_base=2)
        state = initial_state(identity_net(2), head, [0, 1])
        p = infer_protonet(state, np.array([1.0, 0.0]))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)


class TestDegradation:
    def test_eta_one_uniform_equals_protonet(self):
        rng = Rng(8)
        cfg = InferConfig(eta=1.0, prior="uniform", tau=1.0)
        for trial in range(100):
            r = rng.derive(trial)
            d = 2 + int(r.uniform() * 7)
            n_known = 2 + int(r.uniform() * 5)
            n_virtual = 1 + int(r.uniform() * 4)
            state = random_state(n_known, n_virtual, d, seed=trial)
            x = np.asarray(r.normal(d))
            fact = infer_fact(state, cfg, x)
            proto = infer_protonet(state, x, cfg)
            np.testing.assert_allclose(fact, proto, atol=1e-12)


class TestKdLoss:
    def test_lambda_zero_is_cross_entropy(self):
        new = np.array([2.0, 0.0, -1.0])
        expected = -np.log(np.exp(2.0) / np.exp(new).sum())
        assert kd_loss(new, new, 0, 0.0) == pytest.approx(expected, abs=1e-12)

    def test_identical_outputs_give_entropy(self):
        logits = np.array([1.0, 0.5, -0.5])
        p = np.exp(logits) / np.exp(logits).sum()
        entropy = -float(p @ np.log(p))
        assert kd_loss(logits, logits, 0, 1.0) == pytest.approx(entropy, abs=1e-12)

    def test_onehot_vs_uniform_gives_log_c(self):
        old = np.array([100.0, 0.0, 0.0, 0.0])   # one-hot after softmax
        new = np.zeros(4)                         # uniform over C=4
        assert kd_loss(old, new, 0, 1.0) == pytest.approx(np.log(4.0), abs=1e-9)

    def test_dimension_check(self):
        from fscil.errors import DimensionMismatchError

        with pytest.raises(DimensionMismatchError):
            kd_loss(np.zeros(5), np.zeros(3), 0, 0.5)


def session_setup(seed=0):
    """Base-trained state plus one 2-way 5-shot session, desk sized."""
    from fscil.data import RunConfig
    from fscil.runner import run_base_training

    cfg = RunConfig(seed=seed, epochs=40)
    base = run_base_training(cfg)
    return cfg, base.state, base.stream


class TestFinetune:
    def test_zero_steps_no_change(self):
        cfg, state, stream = session_setup()
        split = stream.sessions[0]
        protos = class_prototypes(state.net, split.train)
        expanded = expand_head(state, protos)
        out = finetune_session(expanded, split.train, 0, 0.05)
        assert out is expanded

    def test_base_accuracy_strictly_drops(self):
        from fscil.protocol import evaluate_base_new

        cfg, state, stream = session_setup(seed=1)
        split = stream.sessions[0]
        protos = class_prototypes(state.net, split.train)
        expanded = expand_head(state, protos)
        _, base_before, _ = evaluate_base_new(expanded, stream, 1, mode="protonet")
        tuned = finetune_session(expanded, split.train, 100, 0.05)
        _, base_after, _ = evaluate_base_new(tuned, stream, 1, mode="protonet")
        assert base_after < base_before

    def test_deterministic(self):
        cfg, state, stream = session_setup(seed=2)
        split = stream.sessions[0]
        protos = class_prototypes(state.net, split.train)
        expanded = expand_head(state, protos)
        a = finetune_session(expanded, split.train, 30, 0.05)
        b = finetune_session(expanded, split.train, 30, 0.05)
        for x, y in zip(a.net.param_arrays() + a.head.param_arrays(),
                        b.net.param_arrays() + b.head.param_arrays()):
            np.testing.assert_array_equal(x, y)

    def test_leaves_input_state_untouched(self):
        cfg, state, stream = session_setup(seed=3)
        split = stream.sessions[0]
        expanded = expand_head(state, class_prototypes(state.net, split.train))
        before = [p.copy() for p in expanded.net.param_arrays()]
        finetune_session(expanded, split.train, 20, 0.05)
        for b, a in zip(before, expanded.net.param_arrays()):
            np.testing.assert_array_equal(b, a)


class TestEmbeddingFreeze:
    def test_prototype_sessions_never_touch_the_net(self):
        from fscil.runner import run_sessions

        cfg, state, stream = session_setup(seed=6)
        before = [p.copy() for p in state.net.param_arrays()]
        for method in ("fact", "protonet"):
            run_sessions(state, stream, cfg, method)
            for b, a in zip(before, state.net.param_arrays()):
                np.testing.assert_array_equal(b, a)


class TestKdSession:
    def test_runs_and_covers_session_classes(self):
        cfg, state, stream = session_setup(seed=4)
        split = stream.sessions[0]
        expanded = expand_head(state, class_prototypes(state.net, split.train))
        tuned = kd_session(expanded, state, split.train, 30, 0.05, 0.5)
        assert tuned.head.num_known == expanded.head.num_known
        for c in split.classes:
            assert c in tuned.registry

    def test_distillation_limits_drift_vs_finetune(self):
        # with full weight on distillation the old-class outputs move less
        # than under pure cross-entropy finetuning
        cfg, state, stream = session_setup(seed=5)
        split = stream.sessions[0]
        expanded = expand_head(state, class_prototypes(state.net, split.train))
        n_old = state.head.num_known
        test = stream.base_test
        emb, _ = state.net.forward(test.features)
        before, _ = state.head.logits(emb, use_scale=True)

        def drift(adapted):
            emb2, _ = adapted.net.forward(test.features)
            after, _ = adapted.head.logits(emb2, use_scale=True)
            return float(np.abs(after[:, :n_old] - before[:, :n_old]).mean())

        kd = kd_session(expanded, state, split.train, 50, 0.05, 0.9)
        ft = finetune_session(expanded, split.train, 50, 0.05)
        assert drift(kd) < drift(ft)
