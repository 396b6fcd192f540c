import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dictdis.data import ConstraintMatch, Example, Region, build_augmented_input, pad_batch
from dictdis.errors import InputError
from dictdis.model import (DictDisModel, Gate, ModelConfig, batch_from_input, candidate_embedding,
                           copy_distribution, dis_distribution, forward_teacher_forced, load_checkpoint,
                           mix_distributions, pred_distribution, save_checkpoint)

from conftest import constrained_example, tiny_model, toy_vocab
from oracles import numpy_params, oracle_encode, oracle_step


def _random_input(rng, vocab_size, max_src=6, max_cons=3, max_deg=3, max_len=3):
    S = int(rng.integers(1, max_src + 1))
    src = rng.integers(6, vocab_size, S).tolist()
    matches = []
    for _ in range(int(rng.integers(0, max_cons + 1))):
        deg = int(rng.integers(1, max_deg + 1))
        cands = tuple(tuple(rng.integers(6, vocab_size, int(rng.integers(1, max_len + 1))).tolist())
                      for _ in range(deg))
        matches.append(ConstraintMatch((0, 1), cands))
    return build_augmented_input(src, matches)


@torch.no_grad()
def _step(model, aug, prefix):
    enc = model.encode(batch_from_input(aug))
    return model.decode_step(torch.tensor([prefix]), enc)


class TestEmbed:
    def test_zero_tables(self):
        model = tiny_model()
        for emb in (model.tok_emb, model.pos_emb, model.seg_emb):
            torch.nn.init.zeros_(emb.weight)
        aug = constrained_example().augmented()
        assert model.embed(batch_from_input(aug)).abs().max() == 0

    def test_source_row(self):
        model = tiny_model()
        aug = constrained_example().augmented()
        x = model.embed(batch_from_input(aug))[0]
        expect = model.tok_emb.weight[aug.token_ids[3]] + model.pos_emb.weight[3] + model.seg_emb.weight[0]
        assert torch.equal(x[3], expect)

    def test_hand_set_tables(self):
        model = tiny_model(vocab_size=8, d_model=2, n_heads=1)
        with torch.no_grad():
            model.tok_emb.weight.zero_()
            model.pos_emb.weight.zero_()
            model.seg_emb.weight.zero_()
            model.tok_emb.weight[6] = torch.tensor([1.0, 2.0])
            model.tok_emb.weight[7] = torch.tensor([3.0, 4.0])
            model.pos_emb.weight[0] = torch.tensor([0.5, 0.0])
            model.pos_emb.weight[1] = torch.tensor([0.0, 0.5])
            model.seg_emb.weight[0] = torch.tensor([10.0, 20.0])
        aug = build_augmented_input([6, 7], [])
        x = model.embed(batch_from_input(aug))[0]
        assert x[0].tolist() == [11.5, 22.0]
        assert x[1].tolist() == [13.0, 24.5]

    def test_out_of_range(self):
        model = tiny_model(vocab_size=10)
        with pytest.raises(InputError, match="token id"):
            model.embed(batch_from_input(build_augmented_input([6, 12], [])))


class TestHeads:
    def test_pred_zero_w_uniform(self):
        p = pred_distribution(torch.randn(3, 4), torch.zeros(4, 7))
        assert torch.allclose(p, torch.full((3, 7), 1 / 7))

    def test_pred_two_logits(self):
        p = pred_distribution(torch.tensor([1.0]), torch.tensor([[1.0, 0.0]]))
        assert p.tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)

    def _copy(self, alpha, tokens, regions, V=10):
        a = torch.tensor([[alpha]], dtype=torch.float64)
        return copy_distribution(a, torch.tensor([tokens]), torch.tensor([regions]), V)

    def test_copy_single_support(self):
        C, S = int(Region.CONSTRAINT), int(Region.SOURCE)
        p, present = self._copy([0.6, 0.4], [6, 7], [S, C])
        assert bool(present[0, 0]) and p[0, 0, 7] == 1.0 and p[0, 0].sum() == 1.0

    def test_copy_same_id(self):
        C, S = int(Region.CONSTRAINT), int(Region.SOURCE)
        p, _ = self._copy([0.5, 0.25, 0.25], [6, 7, 7], [S, C, C])
        assert p[0, 0, 7] == 1.0

    def test_copy_renormalizes(self):
        C, S = int(Region.CONSTRAINT), int(Region.SOURCE)
        p, _ = self._copy([0.6, 0.3, 0.1], [6, 8, 9], [S, C, C])
        assert p[0, 0, 8].item() == pytest.approx(0.75, abs=1e-12)
        assert p[0, 0, 9].item() == pytest.approx(0.25, abs=1e-12)

    def test_copy_ignores_separators(self):
        p, present = self._copy([0.5, 0.5], [4, 3], [int(Region.SEP), int(Region.EOS)])
        assert not bool(present[0, 0]) and p.abs().sum() == 0

    def test_candidate_embedding_mean(self):
        model = tiny_model()
        ex = Example([6], [7], [ConstraintMatch((0, 1), ((10,), (11, 12, 13)))])
        aug = ex.augmented()
        enc = model.encode(batch_from_input(aug))
        h = enc.h[0]
        assert torch.equal(candidate_embedding(enc, 1, 1), h[2])
        expect = (h[4] + h[5] + h[6]) / 3
        assert torch.allclose(candidate_embedding(enc, 1, 2), expect, atol=1e-7)
        with pytest.raises(InputError):
            candidate_embedding(enc, 1, 3)

    def _dis(self, e_rows, c, cands):
        ex = Example([6], [7], [ConstraintMatch((0, 1), cands)])
        batch = batch_from_input(ex.augmented())
        e = torch.tensor([e_rows], dtype=torch.float64)
        return dis_distribution(torch.tensor([[c]], dtype=torch.float64), e, batch, 20)

    def test_dis_single_candidate(self):
        P, p, present = self._dis([[3.0, 1.0]], [0.2, 0.7], ((10,),))
        assert P[0, 0, 0] == 1.0 and bool(present[0]) and p[0, 0, 10] == 1.0

    def test_dis_identical_embeddings(self):
        P, _, _ = self._dis([[1.0, 2.0], [1.0, 2.0]], [0.3, -0.4], ((10,), (11,)))
        assert P[0, 0].tolist() == [0.5, 0.5]

    def test_dis_scores_one_zero(self):
        P, p, _ = self._dis([[1.0, 0.0], [0.0, 0.0]], [1.0, 5.0], ((10,), (11, 12)))
        assert P[0, 0].tolist() == pytest.approx([0.7311, 0.2689], abs=1e-4)
        assert p[0, 0, 11].item() == pytest.approx(P[0, 0, 1].item() / 2, abs=1e-12)
        assert p[0, 0].sum().item() == pytest.approx(1.0, abs=1e-12)

    def test_gate_zero(self):
        gate = Gate(3, 4)
        for prm in gate.parameters():
            torch.nn.init.zeros_(prm)
        assert gate(torch.randn(3), torch.randn(3)).item() == 0.5

    def test_gate_saturated(self):
        gate = Gate(3, 4).double()
        for prm in gate.parameters():
            torch.nn.init.zeros_(prm)
        with torch.no_grad():
            gate.fc2.bias.fill_(20.0)
        assert abs(gate(torch.randn(3).double(), torch.randn(3).double()).item() - 1.0) < 1e-8

    def test_gate_hand_set(self):
        gate = Gate(1, 1).double()
        with torch.no_grad():
            gate.fc1.weight.copy_(torch.tensor([[2.0, -1.0]]))
            gate.fc1.bias.fill_(0.5)
            gate.fc2.weight.fill_(1.5)
            gate.fc2.bias.fill_(-1.0)
        c, s = torch.tensor([1.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64)
        # relu(2 - 0.5 + 0.5) = 2; 1.5*2 - 1 = 2
        assert gate(c, s).item() == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)

    def _mix(self, g, p_pred, p_copy, p_dis, has_copy=True, has_dis=True):
        t = lambda v: torch.tensor([[v]], dtype=torch.float64)  # noqa: E731
        return mix_distributions(t(p_pred), t(p_copy), torch.tensor([[has_copy]]), t(p_dis),
                                 torch.tensor([has_dis]), torch.tensor([[g]], dtype=torch.float64))[0, 0]

    def test_mix_hand(self):
        out = self._mix(0.4, [0.9, 0.1], [0.0, 1.0], [0.5, 0.5])
        assert out.tolist() == pytest.approx([0.51, 0.49], abs=1e-12)

    def test_mix_limits(self):
        assert self._mix(1.0, [0.9, 0.1], [0.0, 1.0], [0.5, 0.5]).tolist() == pytest.approx([0.9, 0.1])
        assert self._mix(0.0, [0.9, 0.1], [0.3, 0.7], [0.3, 0.7]).tolist() == pytest.approx([0.3, 0.7])

    def test_mix_single_head_takes_full_weight(self):
        out = self._mix(0.5, [1.0, 0.0], [0.0, 1.0], [0.0, 0.0], has_dis=False)
        assert out.tolist() == [0.5, 0.5]

    def test_mix_bypass(self):
        out = self._mix(0.3, [0.9, 0.1], [0.0, 0.0], [0.0, 0.0], has_copy=False, has_dis=False)
        assert out.tolist() == [0.9, 0.1]


class TestOracleForward:
    def _compare(self, model, aug, prefix, atol=1e-10):
        cfg = model.config
        out = _step(model, aug, prefix)
        ref = oracle_step(numpy_params(model), aug, prefix, cfg.n_layers, cfg.n_heads, cfg.vocab_size)
        assert np.allclose(out.s[0].numpy(), ref["s"], atol=atol)
        assert np.allclose(out.alpha[0].numpy(), ref["alpha"], atol=atol)
        assert np.allclose(out.c[0].numpy(), ref["c"], atol=atol)
        assert np.allclose(out.p_pred[0].numpy(), ref["p_pred"], atol=atol)
        assert np.allclose(out.p_copy[0].numpy(), ref["p_copy"], atol=atol)
        assert np.allclose(out.p_dis[0].numpy(), ref["p_dis"], atol=atol)
        assert out.g[0].item() == pytest.approx(ref["g"], abs=atol)
        assert np.allclose(out.p_final[0].numpy(), ref["p_final"], atol=atol)
        return out, ref

    def test_encoder_hand_scale(self):
        model = tiny_model(vocab_size=6, d_model=2, n_heads=1, n_layers=1, d_ffn=2, double=True, seed=4)
        aug = build_augmented_input([4, 5], [])
        h = model.encode(batch_from_input(aug)).h[0].detach().numpy()
        ref = oracle_encode(numpy_params(model), aug.token_ids, aug.position_ids, aug.segment_ids, 1, 1)
        assert np.allclose(h, ref, atol=1e-12)

    def test_tiny_step(self):
        model = tiny_model(vocab_size=6, d_model=2, n_heads=1, n_layers=1, d_ffn=4, double=True, seed=1)
        aug = build_augmented_input([4, 5], [ConstraintMatch((0, 1), ((3,), (5, 4)))])
        self._compare(model, aug, [2, 5])

    @pytest.mark.parametrize("seed", range(6))
    def test_random_models(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_model(vocab_size=24, d_model=8, n_heads=2, n_layers=2, d_ffn=12, double=True, seed=seed)
        aug = _random_input(rng, 24)
        prefix = [2] + rng.integers(6, 24, int(rng.integers(0, 4))).tolist()
        out, ref = self._compare(model, aug, prefix)
        for (i, j), pij in ref["dis"].items():
            k = [kk for kk, ci in enumerate(sorted({c for c in aug.cand_index if c}))
                 if ci == (i, j)][0]
            assert out.dis_per_candidate[0, k].item() == pytest.approx(pij, abs=1e-10)


class TestProperties:
    def test_simplex_closure_1000(self):
        rng = np.random.default_rng(0)
        configs = [dict(vocab_size=20, d_model=8, n_heads=2, n_layers=1, d_ffn=16),
                   dict(vocab_size=30, d_model=12, n_heads=3, n_layers=2, d_ffn=8)]
        draws = 0
        for m in range(20):
            model = tiny_model(seed=m, **configs[m % 2])
            V = model.vocab_size
            for _ in range(50):
                aug = _random_input(rng, V)
                tgt = rng.integers(6, V, int(rng.integers(0, 4))).tolist()
                batch = pad_batch([aug], [tgt])
                with torch.no_grad():
                    out = model(batch)
                for name in ("p_pred", "p_final"):
                    d = getattr(out, name)[0]
                    assert (d >= 0).all() and torch.allclose(d.sum(-1), torch.ones(d.shape[0]), atol=1e-6)
                for name, present in (("p_copy", out.has_copy[0]), ("p_dis", out.has_dis[0].expand(len(tgt) + 1))):
                    d = getattr(out, name)[0]
                    assert (d >= 0).all()
                    sums = d.sum(-1)
                    assert torch.allclose(sums[present], torch.ones(int(present.sum())), atol=1e-6)
                    assert (sums[~present] == 0).all()
                assert ((out.g > 0) & (out.g < 1)).all()
                alpha_sum = out.alpha[0].sum(-1)
                assert torch.allclose(alpha_sum, torch.ones_like(alpha_sum), atol=1e-6)
                # copy support
                allowed = {aug.token_ids[p] for p, r in enumerate(aug.region) if r == Region.CONSTRAINT}
                mask = torch.ones(V, dtype=torch.bool)
                mask[list(allowed)] = False
                assert (out.p_copy[0][:, mask] == 0).all()
                # per-constraint normalization of the candidate softmax
                K = out.dis_per_candidate.shape[-1]
                groups = batch.cand_constraint[0]
                for i in range(aug.n_constraints):
                    sel = (groups == i)[:K]
                    s = out.dis_per_candidate[0][:, sel].double().sum(-1)
                    assert torch.allclose(s, torch.ones_like(s), atol=1e-6)
                draws += 1
        assert draws == 1000

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_dis_normalization_double(self, seed):
        rng = np.random.default_rng(seed)
        model = tiny_model(vocab_size=20, double=True, seed=seed % 7)
        aug = _random_input(rng, 20, max_cons=4)
        out = _step(model, aug, [2])
        groups = batch_from_input(aug).cand_constraint[0]
        for i in range(aug.n_constraints):
            assert abs(out.dis_per_candidate[0, groups == i].sum().item() - 1.0) <= 1e-9

    def test_bypass_exact(self):
        model = tiny_model()
        ex = Example([6, 7, 8], [9, 10], [])
        out = model(pad_batch([ex.augmented()], [ex.target]))
        assert not out.has_copy.any() and not out.has_dis.any()
        assert torch.equal(out.p_final, out.p_pred)

    def test_determinism(self):
        aug = constrained_example().augmented()
        outs = []
        for threads in (1, 2, 1):
            torch.set_num_threads(threads)
            model = tiny_model(vocab_size=20, d_model=16, n_heads=4, n_layers=2, d_ffn=32, seed=3)
            outs.append(_step(model, aug, [2, 10]).p_final)
        torch.set_num_threads(1)
        assert torch.equal(outs[0], outs[1]) and torch.equal(outs[0], outs[2])

    def test_padding_invariance(self):
        model = tiny_model(vocab_size=20, d_model=16, n_heads=2, n_layers=2, d_ffn=32, seed=2)
        short = build_augmented_input([6, 7], [ConstraintMatch((0, 1), ((10,),))])
        long_ = build_augmented_input([6, 7, 8, 9, 10, 11], [ConstraintMatch((0, 1), ((10, 11, 12), (13,)))])
        a = model(pad_batch([short], [[10, 11]])).p_final[0]
        b = model(pad_batch([short, long_], [[10, 11], [12, 13, 14, 15]])).p_final[0, :3]
        assert (a - b).abs().max() <= 1e-6


def test_teacher_forced_count_and_simplex():
    model = tiny_model()
    ex = constrained_example()
    dists = forward_teacher_forced(ex, model)
    assert len(dists) == len(ex.target) + 1
    for d in dists:
        assert (d >= 0).all() and abs(d.sum().item() - 1) < 1e-6


def test_non_finite_raises():
    from dictdis.errors import NonFiniteError

    model = tiny_model()
    with torch.no_grad():
        model.encoder[0].ffn.fc1.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="layer 0"):
        model.encode(batch_from_input(constrained_example().augmented()))


def test_config_validation():
    with pytest.raises(Exception):
        ModelConfig(vocab_size=20, d_model=10, n_heads=3)


def test_checkpoint_round_trip(tmp_path):
    vocab = toy_vocab(14)
    model = DictDisModel(ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=2, d_ffn=32,
                                     seed=5)).eval()
    path = tmp_path / "m.ddk"
    save_checkpoint(path, model, vocab, meta={"step": 3})
    raw = path.read_bytes()
    assert raw[:8] == b"DDCKPT01"
    ck = load_checkpoint(path)
    assert ck.vocab.tokens == vocab.tokens and ck.meta == {"step": 3}
    assert ck.config == model.config
    loaded = ck.build_model()
    batch = pad_batch([constrained_example().augmented()], [constrained_example().target])
    assert torch.equal(model(batch).p_final, loaded(batch).p_final)
    # saving the loaded model reproduces the file byte for byte
    save_checkpoint(tmp_path / "m2.ddk", loaded, vocab, meta={"step": 3})
    assert (tmp_path / "m2.ddk").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ddk"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(InputError):
        load_checkpoint(path)
