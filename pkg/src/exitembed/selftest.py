"""Fast in-process invariant checks behind ``exitembed selftest``."""
from __future__ import annotations

import tempfile
import time
import traceback
from pathlib import Path

import numpy as np

CHECKS = []


def ensure(cond, *detail) -> None:
    if not cond:
        raise AssertionError(*detail)


def check(name):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn

    return deco


@check("numerics: int4 pack/quantize round trip")
def _int4():
    from .numerics import Rng, dequantize_int4, pack_int4, quantize_int4, unpack_int4

    codes = np.arange(-7, 8, dtype=np.int8)
    ensure(np.array_equal(unpack_int4(pack_int4(codes), len(codes)), codes))
    x = Rng(1).symmetric((64,))
    q = quantize_int4(x)
    ensure(np.max(np.abs(dequantize_int4(q) - x)) <= q.scale / 2 + 1e-7)
    ensure(np.all(dequantize_int4(quantize_int4(np.zeros(5, np.float32))) == 0))


@check("encoder: determinism, residual identity, prefix property")
def _encoder():
    from .encoder import EncoderConfig, init_encoder
    from .numerics import Rng

    a, b = init_encoder(), init_encoder()
    ensure(a.weights_equal(b))
    x = Rng(3).symmetric((5, a.config.input_dim("A")))
    full = a.hidden_trajectory("A", x)
    for n in range(1, a.num_layers):
        ensure(a.exit_hidden("A", x, n).tobytes() == full[n - 1].tobytes())
    z = init_encoder(EncoderConfig(lora_rank=0))
    for blk in z.blocks["A"]:
        blk.w_up[:] = 0
        blk.w_down[:] = 0
    h = Rng(4).symmetric((3, z.config.d_model))
    ensure(np.array_equal(z.forward_range("A", 0, z.num_layers, h), h))


@check("encoder: checkpoint round trip and cache resume")
def _resume(tmp):
    from .encoder import init_encoder, load_checkpoint, save_checkpoint
    from .numerics import Rng

    s = init_encoder()
    save_checkpoint(s, tmp / "m.bin")
    t = load_checkpoint(tmp / "m.bin")
    ensure(s.weights_equal(t) and s.config == t.config)
    x = Rng(5).symmetric((4, s.config.input_dim("A")))
    emb, snap = s.coarse_embed("A", x, 4)
    resumed = s.apply_head(s.forward_range("A", 4, s.num_layers, snap.hidden))
    ensure(resumed.tobytes() == s.fine_embed("A", x).tobytes())


@check("exit_oracle: vectorized labels equal the double loop")
def _oracle():
    from .datagen import generate
    from .encoder import init_encoder
    from .exit_oracle import label_exits
    from .numerics import cosine

    s = init_encoder()
    c = generate(30, seed=7)
    labels = [lab.exit for lab in label_exits(s, c, "A")]
    raw = c.raw["A"]
    fine = [s.fine_embed("A", r) for r in raw]
    coarse = [[s.coarse_embed("A", r, e)[0] for e in range(1, s.num_layers + 1)] for r in raw]
    for x in range(len(raw)):
        want = s.num_layers
        for e in range(1, s.num_layers + 1):
            best, best_id = -2.0, -1
            for y in range(len(raw)):
                v = cosine(fine[x], coarse[y][e - 1])
                if v > best:
                    best, best_id = v, y
            if best_id == x:
                want = e
                break
        ensure(labels[x] == want, (x, labels[x], want))


@check("scheduler: grouped pipeline equals per-item reference")
def _scheduler(tmp):
    from .datagen import generate
    from .encoder import init_encoder, save_checkpoint
    from .exit_oracle import label_exits
    from .predictor import superficial_embed, train_predictor
    from .scheduler import LayerStore, reference_embeddings, run_embedding_pipeline

    s = init_encoder()
    save_checkpoint(s, tmp / "m.bin")
    c = generate(40, seed=2)
    pred, _ = train_predictor(superficial_embed(s, "A", c.raw["A"], 3), label_exits(s, c, "A"), 3, 12, epochs=50)
    res = run_embedding_pipeline(LayerStore(tmp / "m.bin"), c, pred, 3, 7)
    ref = reference_embeddings(s, c, "A", res.predicted_exits)
    for r in res.records:
        ensure(r.embedding.tobytes() == ref[r.item_id][0].tobytes())
    ensure(all(res.stats.layer_invocations[i] == len(c) for i in range(1, 4)))


@check("healing: prefix reuse holds, per-exit suites break it, gradients")
def _healing():
    from .datagen import generate
    from .encoder import init_encoder
    from .exit_oracle import exit_histogram, label_exits
    from .healing import HealConfig, PerExitSuiteStack, gradient_check, heal, make_schedule, verify_prefix_reuse

    s = init_encoder()
    c = generate(60, seed=3)
    labels = label_exits(s, c, "A")
    healed, _ = heal(s, c, labels, make_schedule(exit_histogram(labels), s.num_layers), HealConfig(epochs=5))
    ensure(healed.weights_equal(s, include_lora=False))
    ensure(verify_prefix_reuse(healed).passed)
    ensure(not verify_prefix_reuse(PerExitSuiteStack(s)).passed)
    errs = gradient_check(s, c.raw["A"][:20], s.fine_embed("A", c.raw["A"][:20]), (2, 3))
    ensure(max(errs) < 1e-3, errs)


@check("store: round trip, torn tail, size report, upgrade")
def _store(tmp):
    from .encoder import init_encoder
    from .numerics import Rng
    from .store import EmbeddingRecord, EmbeddingStore

    s = init_encoder()
    x = Rng(9).symmetric((6, s.config.input_dim("A")))
    recs, snaps = [], []
    for i in range(6):
        emb, snap = s.coarse_embed("A", x[i], 1 + i % 3, i)
        recs.append(EmbeddingRecord(i, "A", 1 + i % 3, emb, "coarse"))
        snaps.append(snap)
    p = tmp / "s.emst"
    st = EmbeddingStore(p, s.num_layers)
    st.put_many(recs, snaps)
    ensure(st.storage_report().total_bytes == p.stat().st_size)
    again = EmbeddingStore(p)
    ensure([again.get(i)[0] for i in range(6)] == [st.get(i)[0] for i in range(6)])
    before = p.stat().st_size
    ensure(st.upgrade_to_fine(0, s.fine_embed("A", x[0])))
    ensure(p.stat().st_size < before)
    data = p.read_bytes()
    p.write_bytes(data[:-7])
    torn = EmbeddingStore(p)
    ensure(torn.dropped_tail_bytes > 0 and not torn.integrity_scan())


@check("retrieval: merge oracle and exhaustive equivalence")
def _retrieval(tmp):
    from .datagen import generate
    from .encoder import init_encoder
    from .retrieval import Candidate, global_verify, query, refine_all
    from .store import EmbeddingRecord, EmbeddingStore

    rng = np.random.default_rng(0)
    groups = {g: sorted((Candidate(int(i), g, float(v), 0) for i, v in
                         zip(rng.choice(20, 6, replace=False), rng.random(6))),
                        key=lambda c: (-c.score, c.item_id)) for g in (1, 2, 3)}
    flat = sorted((c for v in groups.values() for c in v), key=lambda c: (-c.score, c.item_id))
    seen, want = set(), []
    for cand in flat:
        if cand.item_id not in seen:
            seen.add(cand.item_id)
            want.append(cand.item_id)
    ensure([c.item_id for c in global_verify(groups, 8)] == want[:8])

    s = init_encoder()
    c = generate(30, seed=4)
    st = EmbeddingStore(tmp / "r.emst", s.num_layers, cache_encoding="f32")
    recs, snaps = [], []
    for i in range(30):
        emb, snap = s.coarse_embed("A", c.raw["A"][i], 1 + i % 4, i)
        recs.append(EmbeddingRecord(i, "A", 1 + i % 4, emb, "coarse"))
        snaps.append(snap)
    st.put_many(recs, snaps)
    for k in range(3):
        oracle = refine_all(s, st, c.raw["B"][k])[0]
        res = query(s, st, c.raw["B"][k], "B", k1=len(st), k2=len(st), upgrade=False)
        ensure(res.ranking == oracle)


@check("tracesim: 25% closed form, fixed(L) equals full")
def _tracesim():
    from .tracesim import DeviceProfile, simulate, synthetic_trace

    tr = synthetic_trace(200, 3.0, seed=1)
    prof = DeviceProfile(layer_load_j=0.0)
    pre = simulate("pre-exit:2", tr, prof, {3: 1}, 12)
    full = simulate("full", tr, prof, {3: 1}, 12)
    ensure(abs(pre.total_energy_j / full.total_energy_j - 0.25) < 0.01)
    ensure(simulate("fixed:12", tr, DeviceProfile(), {3: 1}, 12) == simulate("full", tr, DeviceProfile(), {3: 1}, 12))


def run_selftest(verbose: bool = True) -> list:
    """Run every check; returns the names of failed checks."""
    failures = []
    with tempfile.TemporaryDirectory() as d:
        for k, (name, fn) in enumerate(CHECKS):
            tmp = Path(d) / f"c{k}"
            tmp.mkdir()
            t0 = time.perf_counter()
            try:
                if fn.__code__.co_argcount:
                    fn(tmp)
                else:
                    fn()
                status = "PASS"
            except Exception:
                status = "FAIL"
                failures.append(name)
                if verbose:
                    traceback.print_exc()
            if verbose:
                print(f"{status} {name} ({time.perf_counter() - t0:.2f}s)", flush=True)
    if verbose:
        print(f"selftest: {len(CHECKS) - len(failures)}/{len(CHECKS)} suites passed", flush=True)
    return failures
