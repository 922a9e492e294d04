import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pastakit.adaptation import AblationMode, AdaptationBank
from pastakit.analysis import (BITFIT_BIAS_VECTORS, Target, budget_table, detect_vertical_heads,
                               detect_vertical_heads_batch, heatmap_svg, norm_map, norm_map_svg, param_budget,
                               special_targets, vertical_heads_svg)
from pastakit.tensor import Tensor
from pastakit.transformer import LayerTrace, ModelConfig

from oracles import as_tuples, brute_force


def trace_of(*maps):
    return LayerTrace(hidden_states=[], attention_probs=[Tensor(np.asarray(m, dtype=float)) for m in maps])


def test_all_rows_on_cls_is_vertical():
    m = np.full((1, 6, 6), 0.02)
    m[0, :, 0] = 0.9
    v = detect_vertical_heads(trace_of(m), {0: "CLS", 5: "SEP"}).verdict(0, 0)
    assert (v.fraction_to_special, v.dominant_target, v.is_vertical) == (1.0, Target.CLS, True)


def test_eight_of_ten_on_sep_is_not_vertical():
    m = np.full((1, 10, 10), 0.05)
    m[0, :8, 9] = 0.55
    m[0, 8:, 4] = 0.55
    v = detect_vertical_heads(trace_of(m), {0: "CLS", 9: "SEP"}).verdict(0, 0)
    assert v.fraction_to_special == pytest.approx(0.8)
    assert v.dominant_target is Target.SEP and not v.is_vertical


def test_threshold_boundary_counts_as_vertical():
    m = np.zeros((1, 10, 10))
    m[0, :9, 0] = 1.0
    m[0, 9, 3] = 1.0
    assert detect_vertical_heads(trace_of(m), [0]).verdict(0, 0).is_vertical


def test_equal_cls_and_sep_hits_are_mixed():
    m = np.zeros((1, 4, 4))
    m[0, :2, 0] = 1.0
    m[0, 2:, 3] = 1.0
    v = detect_vertical_heads(trace_of(m), {0: "CLS", 3: "SEP"}).verdict(0, 0)
    assert v.dominant_target is Target.MIXED and v.is_vertical


def test_empty_positions_report_nothing_vertical():
    m = np.zeros((2, 3, 3))
    m[:, :, 0] = 1.0
    report = detect_vertical_heads(trace_of(m, m), [])
    assert len(report.heads) == 4
    assert all(v.fraction_to_special == 0.0 and not v.is_vertical for v in report.heads)


def test_agrees_with_brute_force_on_1000_maps():
    rng = np.random.default_rng(0)
    for i in range(1000):
        H, N = int(rng.integers(1, 4)), int(rng.integers(2, 12))
        logits = rng.normal(size=(H, N, N))
        if i % 3 == 0:
            logits = np.round(logits)  # plenty of exact ties
        if i % 5 == 0:
            logits[:, :, 0] += 3.0  # push some heads toward vertical
        maps = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        k = int(rng.integers(0, min(N, 4) + 1))
        pos = sorted(rng.choice(N, size=k, replace=False).tolist())
        targets = {p: ("CLS" if j == 0 else "SEP") for j, p in enumerate(pos)}
        got = as_tuples(detect_vertical_heads(trace_of(maps), targets))
        assert got == brute_force([maps], targets)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
def test_row_monotone_rescaling_keeps_verdicts(seed, scale, shift):
    rng = np.random.default_rng(seed)
    m = rng.random((2, 7, 7))
    m[:, :, 0] += rng.random() * 1.5
    targets = {0: "CLS", 6: "SEP"}
    base = detect_vertical_heads(trace_of(m), targets)
    row_scale = scale * (1 + rng.random((2, 7, 1)))
    rescaled = np.exp(m * row_scale) + shift
    assert as_tuples(detect_vertical_heads(trace_of(rescaled), targets)) == as_tuples(base)


def test_batched_four_dim_single_sequence_accepted():
    m = np.zeros((1, 2, 3, 3))
    m[..., 0] = 1.0
    assert detect_vertical_heads(trace_of(m), [0]).num_vertical == 2


def test_batch_averaging_is_flagged_and_averages():
    a = np.zeros((1, 10, 10))
    a[0, :, 0] = 1.0
    b = np.zeros((1, 10, 10))
    b[0, :, 0] = 1.0
    b[0, :3, 5] = 2.0  # 0.7 on this sequence
    report = detect_vertical_heads_batch([trace_of(a), trace_of(b)], [[0], [0]])
    assert report.batch_averaged and report.num_sequences == 2
    assert report.verdict(0, 0).fraction_to_special == pytest.approx(0.85)
    assert not report.verdict(0, 0).is_vertical
    assert "averaged over 2 sequences" in report.count_line()


def test_count_line_and_csv():
    m = np.zeros((3, 4, 4))
    m[0, :, 0] = 1.0
    m[1:, :, 2] = 1.0
    report = detect_vertical_heads(trace_of(m), {0: "CLS", 3: "SEP"})
    assert report.count_line() == "1 vertical of 3 total"
    lines = report.to_csv().splitlines()
    assert lines[0] == "layer,head,fraction,dominant,is_vertical"
    assert lines[1] == "0,0,1.0000000000,CLS,true"
    assert lines[2] == "0,1,0.0000000000,Mixed,false"


def test_special_targets():
    assert special_targets([1, 5, 2, 6, 2], 1, 2) == {0: Target.CLS, 2: Target.SEP, 4: Target.SEP}


def test_norm_map_zero_and_345():
    bank = AdaptationBank(3, 2, 2)
    assert np.all(norm_map(bank).matrix == 0.0)
    bank.vectors[1][1].data[...] = [3.0, 4.0]
    nm = norm_map(bank)
    assert nm.matrix[1, 1] == 5.0 and nm.matrix.sum() == 5.0
    assert nm.to_csv().splitlines() == ["layer,slot0,slot1", "0,0.0000000000,0.0000000000",
                                        "1,0.0000000000,5.0000000000", "2,0.0000000000,0.0000000000"]


def test_norm_map_disabled_slots_are_zero():
    bank = AdaptationBank(2, 2, 2, AblationMode.NO_CLS)
    for t in bank.parameters():
        t.data[...] = 1.0
    np.testing.assert_allclose(norm_map(bank).matrix, [[0, np.sqrt(2)], [0, np.sqrt(2)]])


def test_svgs_are_well_formed():
    import xml.etree.ElementTree as ET

    m = np.zeros((2, 2, 3, 3))
    m[..., 0] = 1.0
    report = detect_vertical_heads(trace_of(*m), [0])
    for svg in (vertical_heads_svg(report), norm_map_svg(norm_map(AdaptationBank(2, 2, 2))),
                heatmap_svg(np.eye(2), ["a", "<b>"], ["x", "y"], "t&t")):
        root = ET.fromstring(svg)
        assert root.tag.endswith("svg")


BERT = ModelConfig(num_layers=24, hidden_size=1024, num_heads=16, ffn_size=4096)


def budgets(cfg=BERT, r=64, T=20, P=2):
    return {b.method: b for b in param_budget(cfg, r=r, T=T, P=P)}


def test_budget_counts():
    b = budgets(P=3)
    assert b["PASTA"].count == 73_728
    assert b["Adapter"].count == 2 * 24 * 2 * 1024 * 64
    assert b["BitFit"].count == 24 * (1024 * BITFIT_BIAS_VECTORS + 4096)
    assert b["Diff-Prune"].count is None


def test_budget_ptuning_vs_pasta():
    b = budgets(P=2)
    assert b["P-tuning v2"].count == 491_520 and b["PASTA"].count == 49_152
    assert b["P-tuning v2"].count / b["PASTA"].count == 10


def test_bitfit_matches_reported_share():
    # BERT-large BitFit is reported as 0.08% of the backbone
    assert round(100 * budgets()["BitFit"].fraction_of(335_141_888), 2) == 0.08


def test_consistency_flags():
    b = budgets()
    assert [m for m, x in b.items() if not x.parameter_consistency] == ["Diff-Prune"]


@settings(max_examples=30, deadline=None)
@given(L=st.integers(1, 30), d=st.integers(1, 64), P=st.integers(1, 5), r=st.integers(1, 64), T=st.integers(1, 64))
def test_pasta_budget_scaling(L, d, P, r, T):
    cfg = ModelConfig(num_layers=L, hidden_size=d, num_heads=1, ffn_size=3)
    base = budgets(cfg, r=r, T=T, P=P)["PASTA"].count
    assert base == L * P * d
    assert budgets(cfg, r=r + 7, T=T + 3, P=P)["PASTA"].count == base
    big_vocab = ModelConfig(num_layers=L, hidden_size=d, num_heads=1, ffn_size=3, vocab_size=999, max_len=7)
    assert budgets(big_vocab, r=r, T=T, P=P)["PASTA"].count == base
    double_l = ModelConfig(num_layers=2 * L, hidden_size=d, num_heads=1, ffn_size=3)
    assert budgets(double_l, r=r, T=T, P=P)["PASTA"].count == 2 * base
    assert budgets(cfg, r=r, T=T, P=2 * P)["PASTA"].count == 2 * base


def test_budget_rejects_nonpositive_extras():
    with pytest.raises(ValueError):
        param_budget(BERT, r=0, T=20, P=2)


def test_budget_for_ablation_mode():
    shared = param_budget(BERT, r=64, T=20, P=3, mode=AblationMode.SHARED)[-1]
    assert shared.count == 24 * 1024


def test_budget_table_text():
    text = budget_table(param_budget(BERT, r=64, T=20, P=3), 335_141_888)
    assert "73,728" in text and "0.0220%" in text and "data-dependent" in text
