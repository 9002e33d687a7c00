"""Acceptance criteria 1-11, one test each, at their stated tolerances.

Every test records a PASS/FAIL line (printed in the terminal summary) before
asserting, so the whole table is visible even when a criterion fails.
"""
import time

import numpy as np
import pytest

from conftest import record_acceptance
from exitembed.cli import ARTIFACTS, EXIT_OK, main
from exitembed.config import RunConfig
from exitembed.datagen import generate
from exitembed.encoder import init_encoder, save_checkpoint
from exitembed.exit_oracle import exit_histogram, label_exits
from exitembed.healing import (
    HealConfig,
    PerExitSuiteStack,
    gradient_check,
    heal,
    make_schedule,
    verify_prefix_reuse,
)
from exitembed.numerics import cosine_matrix
from exitembed.predictor import ExitPredictor, split_indices, superficial_embed, sweep_superficial_depth, train_predictor
from exitembed.retrieval import (
    embed_query_multigranular,
    global_verify,
    query,
    recall_at,
    refine_all,
    resume_fine,
    speculative_filter,
)
from exitembed.scheduler import LayerStore, reference_embeddings, run_embedding_pipeline
from exitembed.store import EmbeddingRecord, EmbeddingStore
from exitembed.tracesim import DeviceProfile, compare, default_scenario, simulate, synthetic_trace
from helpers import brute_force_labels, norm_threshold_task

CFG = RunConfig()


def default_corpus(n=None, seed=None):
    """The corpus ``exitembed gen-data`` builds for the default configuration."""
    root = CFG if seed is None else RunConfig(seed=seed)
    return generate(n or CFG.n_items, noise_low=CFG.noise_low, noise_high=CFG.noise_high,
                    seed=root.stage_seed("gen-data"), mixing_seed=CFG.encoder_seed,
                    nuisance_scale=CFG.nuisance_scale, noise_floor=CFG.noise_floor)


def run_default_chain(tmp_path, corpus, stack):
    """Label, train the predictor, heal and embed, all with default settings."""
    labels = label_exits(stack, corpus, CFG.store_modality)
    feats = superficial_embed(stack, "A", corpus.raw["A"], CFG.n_superficial)
    pred, _ = train_predictor(feats, labels, CFG.n_superficial, CFG.num_layers)
    healed, report = heal(stack, corpus, labels, make_schedule(exit_histogram(labels), CFG.num_layers),
                          HealConfig())
    path = tmp_path / "healed.bin"
    save_checkpoint(healed, path)
    res = run_embedding_pipeline(LayerStore(path), corpus, pred, CFG.n_superficial, CFG.max_batch)
    return labels, pred, healed, report, path, res


@pytest.fixture(scope="module")
def base_stack():
    return init_encoder(CFG.encoder_config())


@pytest.fixture(scope="module")
def chain(tmp_path_factory, base_stack):
    corpus = default_corpus()
    labels, pred, healed, report, path, res = run_default_chain(tmp_path_factory.mktemp("chain"), corpus,
                                                                base_stack)
    return {"corpus": corpus, "labels": labels, "predictor": pred, "healed": healed, "report": report,
            "path": path, "result": res}


def build_store(path, recs, snaps, num_layers, cache="int4"):
    st = EmbeddingStore(path, num_layers, cache_encoding=cache)
    st.put_many(recs, snaps)
    return st


# --------------------------------------------------------------------------


def test_c01_scheduling_transparency(chain, base_stack):
    corpus, healed = chain["corpus"], chain["healed"]
    assert len(corpus) == 200
    t0 = time.perf_counter()
    res = run_embedding_pipeline(LayerStore(chain["path"]), corpus, chain["predictor"], CFG.n_superficial,
                                 CFG.max_batch, pipeline=True)
    elapsed = time.perf_counter() - t0
    ref = reference_embeddings(healed, corpus, "A", res.predicted_exits)
    worst, bitwise = 0.0, True
    for rec in res.records:
        want = ref[rec.item_id][0].astype(np.float64)
        got = rec.embedding.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-30)))
        bitwise &= rec.embedding.tobytes() == ref[rec.item_id][0].tobytes()
    ok = worst <= 1e-6 and elapsed < 10.0
    record_acceptance(1, "scheduling transparency", ok,
                      f"max rel diff {worst:.1e}, bitwise={bitwise}, {elapsed:.2f}s")
    assert ok


def test_c02_prefix_reuse(chain, base_stack):
    good = verify_prefix_reuse(chain["healed"], "A", n_inputs=50)
    control = verify_prefix_reuse(PerExitSuiteStack(chain["healed"]), "A", n_inputs=50)
    ok = good.passed and good.checked == 50 * (CFG.num_layers - 1) and not control.passed
    record_acceptance(2, "prefix reuse after healing", ok,
                      f"healed mismatches {good.mismatched_layers}, control mismatches "
                      f"{len(control.mismatched_layers)}/{CFG.num_layers - 1} layers")
    assert ok


def test_c03_cache_resume(tmp_path, chain):
    healed = chain["healed"]
    res = chain["result"]
    lossless = build_store(tmp_path / "f32.emst", res.records, res.snapshots, CFG.num_layers, cache="f32")
    fine = resume_fine(healed, lossless, lossless.ids)
    want = healed.fine_embed("A", chain["corpus"].raw["A"])
    rel = max(float(np.max(np.abs(fine[i].astype(np.float64) - want[k])) / np.max(np.abs(want[k])))
              for k, i in enumerate(chain["corpus"].ids))

    corpus = default_corpus(500)
    labels = label_exits(healed, corpus, "A")
    feats = superficial_embed(healed, "A", corpus.raw["A"], CFG.n_superficial)
    pred, _ = train_predictor(feats, labels, CFG.n_superficial, CFG.num_layers)
    save_checkpoint(healed, tmp_path / "h.bin")
    big = run_embedding_pipeline(LayerStore(tmp_path / "h.bin"), corpus, pred, CFG.n_superficial, CFG.max_batch)
    int4 = build_store(tmp_path / "int4.emst", big.records, big.snapshots, CFG.num_layers, cache="int4")
    approx = resume_fine(healed, int4, int4.ids)
    exact = healed.fine_embed("A", corpus.raw["A"])
    cos = np.array([cosine_matrix(approx[int(i)], exact[k])[0, 0] for k, i in enumerate(corpus.ids)])
    frac = float(np.mean(cos >= 0.99))
    ok = rel <= 1e-6 and frac >= 0.99
    record_acceptance(3, "cache-resume equivalence", ok,
                      f"lossless rel {rel:.1e}; INT4 cos>=0.99 on {frac:.1%} of 500 (median {np.median(cos):.4f})")
    assert rel <= 1e-6
    assert frac >= 0.99


def test_c04_oracle_agreement(base_stack):
    corpus = default_corpus(100)
    fast = {lab.item_id: lab.exit for lab in label_exits(base_stack, corpus, "A")}
    slow = brute_force_labels(base_stack, corpus, "A")
    mismatches = sum(fast[i] != slow[i] for i in slow)
    record_acceptance(4, "oracle agreement", mismatches == 0, f"{mismatches} mismatches on 100 items")
    assert mismatches == 0


def test_c05_predictor_quality_and_trend(base_stack):
    X, y = norm_threshold_task(600, seed=0)
    tr, te = split_indices(len(y), 0)
    acc = ExitPredictor(n_superficial=3, num_layers=12, epochs=1000).fit(X[tr], y[tr]).score(X[te], y[te])

    depths = list(range(2, CFG.num_layers // 2 + 1))
    per_seed = []
    for seed in range(5):
        corpus = default_corpus(seed=seed)
        labels = label_exits(base_stack, corpus, "A")
        per_seed.append(sweep_superficial_depth(base_stack, corpus, labels, depths, seed=seed))
    means = [float(np.mean([s[n] for s in per_seed])) for n in depths]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    ok = acc >= 0.9 and monotone
    trend = ", ".join(f"N={n}:{m:.3f}" for n, m in zip(depths, means))
    record_acceptance(5, "predictor quality and trend", ok, f"norm task {acc:.3f}; {trend}")
    assert acc >= 0.9
    assert monotone


def test_c06_retrieval(tmp_path, chain, base_stack):
    dominance = []
    for seed in range(3):
        if seed == 0:
            corpus, healed, res = chain["corpus"], chain["healed"], chain["result"]
        else:
            corpus = default_corpus(seed=seed)
            workdir = tmp_path / f"s{seed}"
            workdir.mkdir()
            _, _, healed, _, _, res = run_default_chain(workdir, corpus, base_stack)
        st = build_store(tmp_path / f"q{seed}.emst", res.records, res.snapshots, CFG.num_layers)
        results = [query(healed, st, corpus.raw["B"][k], "B", CFG.k1, CFG.k2) for k in range(len(corpus))]
        truth = [int(i) for i in corpus.ids]
        coarse = recall_at([r.coarse_ranking for r in results], truth, 1)
        final = recall_at(results, truth, 1)
        dominance.append((coarse, final))

    corpus, healed, res = chain["corpus"], chain["healed"], chain["result"]
    st = build_store(tmp_path / "ex.emst", res.records, res.snapshots, CFG.num_layers)
    n = len(st)
    exhaustive = all(
        query(healed, st, corpus.raw["B"][k], "B", n, n, upgrade=False).ranking
        == refine_all(healed, st, corpus.raw["B"][k])[0]
        for k in range(20)
    )

    labels = {lab.item_id: lab.exit for lab in chain["labels"]}
    recs, snaps = [], []
    for k, i in enumerate(corpus.ids):
        e = min(labels[int(i)], 3)
        emb, snap = healed.coarse_embed("A", corpus.raw["A"][k], e, int(i))
        recs.append(EmbeddingRecord(int(i), "A", e, emb, "coarse"))
        snaps.append(snap)
    early = build_store(tmp_path / "early.emst", recs, snaps, CFG.num_layers)
    share = float(np.mean([r.exit <= 3 for r in early.records()]))
    keys = np.stack([r.embedding for r in early.records()])
    key_ids = [r.item_id for r in early.records()]
    matched_hits = full_hits = 0
    for k, i in enumerate(corpus.ids):
        q = embed_query_multigranular(healed, "B", corpus.raw["B"][k], early.list_exits() + [CFG.num_layers])
        top = [c.item_id for c in global_verify(speculative_filter(early, q, 10), 10)]
        matched_hits += int(i) in top
        s = cosine_matrix(q[CFG.num_layers], keys)[0]
        order = sorted(range(len(key_ids)), key=lambda j: (-s[j], key_ids[j]))[:10]
        full_hits += int(i) in [key_ids[j] for j in order]
    matched, full = matched_hits / len(corpus), full_hits / len(corpus)

    dom_ok = all(f >= c for c, f in dominance)
    ok = dom_ok and exhaustive and share >= 0.99 and matched > full
    dom = "; ".join(f"R@1 {c:.3f}->{f:.3f}" for c, f in dominance)
    record_acceptance(6, "retrieval dominance and exhaustive equivalence", ok,
                      f"{dom}; exhaustive={exhaustive}; matched R@10 {matched:.3f} vs full {full:.3f}")
    assert dom_ok
    assert exhaustive
    assert share >= 0.99 and matched > full


def test_c07_healing_benefit(chain):
    report, healed = chain["report"], chain["healed"]
    populated = sorted(exit_histogram(chain["labels"]))[:3]
    improved = all(report.post_alignment[e] > report.pre_alignment[e] for e in populated)
    monotone = all(b <= a + 1e-4 for curve in report.loss_curves.values() for a, b in zip(curve, curve[1:]))
    raw = chain["corpus"].raw["A"][:32]
    errs = gradient_check(healed, raw, healed.fine_embed("A", raw), (2, 3, 4), n_probes=10)
    grad_ok = len(errs) == 10 and max(errs) <= 1e-3
    ok = improved and monotone and grad_ok
    gains = ", ".join(f"e{e}: {report.pre_alignment[e]:.4f}->{report.post_alignment[e]:.4f}" for e in populated)
    record_acceptance(7, "healing benefit", ok, f"{gains}; max grad rel err {max(errs):.1e}")
    assert improved and monotone and grad_ok


def test_c08_simulator(chain):
    L = CFG.num_layers
    zero_load = DeviceProfile(layer_load_j=0.0)
    trace = synthetic_trace(1000, 4.0, seed=0)
    dist = {L // 4: 1}
    pre = simulate(f"pre-exit:{L // 4 - 1}", trace, zero_load, dist, L)
    full = simulate("full", trace, zero_load, dist, L)
    ratio = pre.total_energy_j / full.total_energy_j
    same = simulate(f"fixed:{L}", trace, DeviceProfile(), dist, L) == simulate("full", trace, DeviceProfile(), dist, L)

    hist = exit_histogram(chain["labels"])
    trace, profile, policies = default_scenario(hist, L)
    rows = compare(policies, trace, profile, hist, num_layers=L)
    energy = {row["policy"]: row["report"].total_energy_j for row in rows}
    e_full, e_fixed, e_pre = (rows[k]["report"].total_energy_j for k in range(3))
    ordered = e_pre < e_fixed < e_full
    ok = abs(ratio - 0.25) <= 0.01 * 0.25 and same and ordered
    record_acceptance(8, "simulator analytics", ok,
                      f"quarter ratio {ratio:.4f}; fixed(L)==full {same}; "
                      + ", ".join(f"{k} {v:.0f} J" for k, v in energy.items()))
    assert abs(ratio - 0.25) <= 0.01 * 0.25
    assert same
    assert ordered


def test_c09_pipeline_timing(chain):
    sub = chain["corpus"].subset(np.arange(16))
    res = run_embedding_pipeline(LayerStore(chain["path"]), sub, chain["predictor"], CFG.n_superficial,
                                 CFG.max_batch, pipeline=True, inject_load_s=0.27, inject_compute_s=0.04)
    model = res.stats.analytic_seconds(0.27, 0.04)
    measured = res.stats.wall_seconds
    err = abs(measured - model) / model
    ok = err <= 0.10
    record_acceptance(9, "pipeline timing model", ok,
                      f"measured {measured:.3f}s vs model {model:.3f}s ({err:.1%}); serial would be "
                      f"{res.stats.serial_seconds:.3f}s")
    assert ok


def test_c10_persistence(tmp_path, chain):
    res = chain["result"]
    path = tmp_path / "p.emst"
    st = build_store(path, res.records, res.snapshots, CFG.num_layers)
    again = EmbeddingStore(path)
    identical = all(
        st.get(i)[0] == again.get(i)[0]
        and st.get(i)[1].quant.to_bytes() == again.get(i)[1].quant.to_bytes()
        for i in st.ids
    ) and sorted(st.ids) == sorted(again.ids)
    size_ok = st.storage_report().total_bytes == path.stat().st_size

    before = path.stat().st_size
    first = st.ids[0]
    upgraded = st.upgrade_to_fine(first, chain["healed"].fine_embed("A", chain["corpus"].raw["A"][0]))
    shrinks = upgraded and path.stat().st_size < before and st.storage_report().total_bytes == path.stat().st_size

    data = path.read_bytes()
    path.write_bytes(data[:-13])
    torn = EmbeddingStore(path)
    tail_ok = (torn.dropped_tail_bytes > 0 and torn.storage_report().total_bytes == path.stat().st_size
               and all(torn.get(i)[0] == st.get(i)[0] for i in torn.ids))
    ok = identical and size_ok and shrinks and tail_ok
    record_acceptance(10, "persistence", ok,
                      f"round trip {identical}, size report exact {size_ok}, upgrade shrinks {shrinks}, "
                      f"torn tail dropped {torn.dropped_tail_bytes} B")
    assert ok


def test_c11_end_to_end(tmp_path, capsys):
    wd = str(tmp_path / "run")
    t0 = time.perf_counter()
    codes = {cmd: main([cmd, "--workdir", wd]) for cmd in
             ("gen-data", "label-exits", "train-predictor", "heal", "embed", "query", "eval")}
    elapsed = time.perf_counter() - t0
    selftest = main(["selftest"])
    out = capsys.readouterr().out
    produced = all((tmp_path / "run" / ARTIFACTS[k]).is_file() for k in ("store", "query", "eval"))
    ok = all(c == EXIT_OK for c in codes.values()) and elapsed < 60 and selftest == EXIT_OK and produced
    record_acceptance(11, "end-to-end CLI chain and selftest", ok,
                      f"chain {elapsed:.1f}s, exit codes {set(codes.values())}, selftest exit {selftest}")
    assert ok, out[-2000:]
