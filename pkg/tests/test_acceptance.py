"""End-to-end acceptance checks. Each test records one PASS/FAIL line in the terminal summary.

The GAN comparisons (criteria 6 to 8) train all three variants for 2000 generator
steps at default hyperparameters over five seeds, which takes roughly 20 minutes on one core.
"""

import hashlib
import statistics

import numpy as np
import pytest

from conftest import arp_frame, pcap_bytes, record_criterion, tcp_frame, udp_frame
from gradcheck import gradient_error, random_graph
from oracles import emd_oracle, js_oracle, random_pmf
from test_encoding import cosine, shared_context_corpus
from headergan import diffcore as dc
from headergan.cli import main
from headergan.config import PipelineConfig
from headergan.encoding import (
    decode_embedding,
    decode_onehot,
    encode_embedding,
    encode_onehot,
    fit_schema,
    indices_to_records,
    total_onehot_dim,
    train_embeddings,
)
from headergan.gan import VARIANTS, TrainConfig, build_models, critic_step, generator_loss, sample_trace, train
from headergan.gnn import GnnConfig, GnnModel, pretrain_autoencoder
from headergan.metrics import emd_normalized, evaluate, js_divergence, mean_js
from headergan.pipeline import variant_seed
from headergan.trace_io import (
    CONTINUOUS_FIELDS,
    DISCRETE_FIELDS,
    FIELDS,
    HeaderRecord,
    ReferenceSpec,
    TraceDataset,
    generate_reference,
    read_pcap,
)

pytestmark = pytest.mark.slow

SEEDS = (7, 8, 9, 10, 11)


def test_criterion_1_metric_oracles():
    cases = [([0.3, 0.7], [0.3, 0.7], 0.0), ([1.0, 0.0], [0.0, 1.0], 1.0), ([0.5, 0.5], [1.0, 0.0], js_oracle([0.5, 0.5], [1.0, 0.0]))]
    js_err = max(abs(js_divergence(p, q) - want) for p, q, want in cases)
    rng = np.random.default_rng(1)
    emd_err = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 9))
        p, q = random_pmf(rng, n, sparse=True), random_pmf(rng, n, sparse=True)
        emd_err = max(emd_err, abs(emd_normalized(p, q) - emd_oracle(p, q)))
    ok = js_err <= 1e-6 and emd_err <= 1e-9 and abs(cases[2][2] - 0.3113) < 1e-4
    record_criterion(1, ok, f"max JS error {js_err:.2e} (tol 1e-6); max EMD error over 500 instances {emd_err:.2e} (tol 1e-9)")
    assert ok


def test_criterion_2_gradient_certification(small_trace, small_schema):
    rng = np.random.default_rng(0)
    graph_err = max(gradient_error(*random_graph(rng)) for _ in range(100))
    table = train_embeddings(small_trace, small_schema, dim=4, epochs=1, seed=1)
    gnn = GnnModel(GnnConfig(in_dim=4, hidden=5, out_dim=3), np.random.default_rng(2))
    cfg = TrainConfig(noise_dim=3, gen_hidden=6, critic_hidden=6, seed=0)
    g, d = build_models(cfg, small_schema, table, gnn)
    for p in d.parameters():
        p.data *= 20.0
    z = np.random.default_rng(4).standard_normal((3, 3))
    composite_err = gradient_error(g.parameters() + gnn.parameters() + d.parameters(), lambda: generator_loss(z, g, gnn, d, cfg))
    ok = graph_err < 1e-3 and composite_err < 1e-3
    record_criterion(2, ok, f"100 random graphs max rel error {graph_err:.2e}; D(concat(G, GNN(G))) max rel error {composite_err:.2e} (tol 1e-3)")
    assert ok


def random_dataset(rng):
    n = int(rng.integers(5, 60))
    pools = {f: [f"{f}-{i}" for i in range(int(rng.integers(1, 12)))] for f in ("src_ip", "dst_ip", "protocol", "flag")}
    ports = rng.integers(0, 65536, int(rng.integers(1, 12)))
    recs = []
    for i in range(n):
        recs.append(HeaderRecord(
            str(rng.choice(pools["src_ip"])), str(rng.choice(pools["dst_ip"])),
            int(rng.choice(ports)), int(rng.choice(ports)), str(rng.choice(pools["protocol"])),
            int(rng.integers(0, 3)), str(rng.choice(pools["flag"])),
            float(rng.choice([64.0, float(rng.uniform(0, 255))])), float(i), float(rng.uniform(20, 1500)),
        ))
    return TraceDataset(recs)


def expected_width(ds, max_vocab, buckets):
    k = sum(min(len(set(ds.column(f))), max_vocab) + 1 for f in DISCRETE_FIELDS)
    m = sum(1 if len(set(ds.column(f))) == 1 else buckets for f in CONTINUOUS_FIELDS)
    return k + m


def test_criterion_3_encoding_invariants(small_schema, small_table):
    rng = np.random.default_rng(3)
    width_ok = slices_ok = True
    for _ in range(50):
        ds = random_dataset(rng)
        max_vocab, buckets = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        schema = fit_schema(ds, max_vocab, buckets)
        batch = encode_onehot(ds.records, schema)
        width_ok &= batch.matrix.shape[1] == total_onehot_dim(schema) == expected_width(ds, max_vocab, buckets)
        slices_ok &= all(np.array_equal(batch.field(f).sum(axis=1), np.ones(len(ds))) for f in DISCRETE_FIELDS + CONTINUOUS_FIELDS)
    # in-vocabulary token indices and bucket indices, decoded to midpoint-valued records
    highs = [small_schema.cardinality(f) - (1 if f in DISCRETE_FIELDS else 0) for f in DISCRETE_FIELDS + CONTINUOUS_FIELDS]
    idx = np.column_stack([rng.integers(0, h, 200) for h in highs])
    order = [(DISCRETE_FIELDS + CONTINUOUS_FIELDS).index(f) for f in FIELDS]
    recs = indices_to_records(idx[:, order], small_schema)
    identity_ok = (
        decode_onehot(encode_onehot(recs, small_schema), small_schema) == recs
        and decode_embedding(encode_embedding(recs, small_schema, small_table), small_schema, small_table) == recs
    )
    ok = bool(width_ok and slices_ok and identity_ok)
    record_criterion(3, ok, f"width formula on 50 schemas: {width_ok}; slices sum to 1: {slices_ok}; decode(encode) identity on 200 records: {identity_ok}")
    assert ok


def test_criterion_4_embedding_semantics():
    wins = []
    for seed in SEEDS:
        ds = shared_context_corpus(seed)
        schema = fit_schema(ds)
        table = train_embeddings(ds, schema, seed=seed)
        e = lambda p: table.vector(schema, "dst_port", p)
        wins.append(cosine(e(80), e(443)) > cosine(e(80), e(53)))
    ok = sum(wins) >= 4
    record_criterion(4, ok, f"cos(80,443) > cos(80,53) in {sum(wins)}/5 seeds (need >= 4)")
    assert ok


def test_criterion_5_autoencoder(small_trace, small_schema):
    ratios = []
    for seed in (1, 2, 3):
        table = train_embeddings(small_trace, small_schema, seed=seed)
        model = pretrain_autoencoder(small_trace, small_schema, table, GnnConfig(in_dim=table.dim), epochs=50, seed=seed)
        ratios.append(model.loss_history[-1] / model.loss_history[0])
    ok = all(r <= 0.5 for r in ratios)
    record_criterion(5, ok, "final/first epoch loss per seed: " + ", ".join(f"{r:.4f}" for r in ratios) + " (need <= 0.5)")
    assert ok


# -- desk-scale GAN experiment ------------------------------------------------------


@pytest.fixture(scope="module")
def desk_runs():
    """Mean JS at step 0 and after 2000 steps for every (seed, variant), mirroring ``experiment``."""
    reference = generate_reference(ReferenceSpec(n_records=2000, seed=7))
    out = {}
    for seed in SEEDS:
        cfg = PipelineConfig(seed=seed)
        schema = fit_schema(reference, cfg.max_vocab, cfg.buckets, cfg.binning)
        table = train_embeddings(reference, schema, cfg.embed_dim, cfg.embed_epochs, cfg.negatives, seed, cfg.embed_lr)
        gnn = pretrain_autoencoder(reference, schema, table, cfg.gnn_config(), cfg.ae_epochs, seed, cfg.ae_lr, cfg.ae_batch).encoder
        for variant in VARIANTS:
            vseed = variant_seed(cfg, variant)
            tcfg = cfg.train_config(variant, vseed)
            tcfg.checkpoint_every = tcfg.steps
            scores = {}

            def probe(step, generator):
                synth = sample_trace(generator, len(reference), schema, table, seed=vseed)
                scores[step] = mean_js(evaluate(reference, synth, bins=cfg.metric_bins))

            train(reference, schema, table, gnn if VARIANTS[variant][1] else None, tcfg, callback=probe)
            out[seed, variant] = (scores[0], scores[tcfg.steps])
            print(f"seed {seed} {variant}: mean JS {scores[0]:.4f} -> {scores[tcfg.steps]:.4f}")
    return out


def median_final(runs, variant):
    return statistics.median(runs[s, variant][1] for s in SEEDS)


def test_criterion_6_gan_learns(desk_runs):
    improved = [desk_runs[s, "w2v-gnn-wgan"][1] < desk_runs[s, "w2v-gnn-wgan"][0] for s in SEEDS]
    detail = ", ".join(f"{desk_runs[s, 'w2v-gnn-wgan'][0]:.3f}->{desk_runs[s, 'w2v-gnn-wgan'][1]:.3f}" for s in SEEDS)
    ok = sum(improved) >= 4
    record_criterion(6, ok, f"w2v-gnn-wgan mean JS init->final improved in {sum(improved)}/5 seeds (need >= 4): {detail}")
    assert ok


def test_criterion_7_embedding_vs_onehot(desk_runs):
    w2v, onehot = median_final(desk_runs, "w2v-wgan"), median_final(desk_runs, "onehot-wgan")
    ok = w2v <= onehot
    record_criterion(7, ok, f"median final mean JS w2v-wgan {w2v:.4f} vs onehot-wgan {onehot:.4f} (need w2v <= onehot)")
    assert ok


def test_criterion_8_gnn_vs_plain(desk_runs):
    gnn, w2v = median_final(desk_runs, "w2v-gnn-wgan"), median_final(desk_runs, "w2v-wgan")
    ok = gnn <= w2v
    record_criterion(8, ok, f"median final mean JS w2v-gnn-wgan {gnn:.4f} vs w2v-wgan {w2v:.4f} (need gnn <= w2v)")
    assert ok


# -- structural invariants ------------------------------------------------------------


def checksum(params):
    return hashlib.sha256(b"".join(np.ascontiguousarray(p.data).tobytes() for p in params)).hexdigest()


def test_criterion_9_structural_invariants(small_trace, small_schema, small_table, tmp_path):
    rng = np.random.default_rng(9)
    gnn = GnnModel(GnnConfig(in_dim=small_table.dim), rng)
    x = rng.standard_normal((16, 10, small_table.dim))
    perm = rng.permutation(10)
    h, hp = gnn.node_states(x.reshape(16, -1)).data, gnn.node_states(x[:, perm].reshape(16, -1)).data
    equivariant = np.array_equal(hp, h[:, perm])
    invariant = np.array_equal(gnn(x.reshape(16, -1)).data, gnn(x[:, perm].reshape(16, -1)).data)

    cfg = TrainConfig(batch_size=32, noise_dim=16, gen_hidden=32, critic_hidden=32, seed=9)
    g, d = build_models(cfg, small_schema, small_table, gnn)
    real = encode_embedding(small_trace.records, small_schema, small_table).matrix
    opt = dc.RMSProp(d.parameters(), cfg.lr_critic)
    clip_ok = isolation_ok = True
    for _ in range(25):
        before = (checksum(g.parameters()), checksum(gnn.parameters()))
        critic_step(real[rng.integers(0, len(real), 32)], rng.standard_normal((32, 16)), g, gnn, d, cfg, opt)
        clip_ok &= max(float(np.abs(p.data).max()) for p in d.parameters()) <= cfg.clip
        isolation_ok &= (checksum(g.parameters()), checksum(gnn.parameters())) == before

    small = [
        "--n-records", "150", "--embed-dim", "4", "--embed-epochs", "1", "--buckets", "6", "--gnn-hidden", "4",
        "--gnn-out", "4", "--decoder-hidden", "8", "--ae-epochs", "2", "--steps", "20", "--batch-size", "16",
        "--noise-dim", "4", "--gen-hidden", "8", "--critic-hidden", "8",
    ]
    assert main(["synth-reference", "--out", str(tmp_path / "ref"), *small]) == 0
    trace = str(tmp_path / "ref" / "trace.csv")
    for run in ("a", "b"):
        assert main(["experiment", "--input", trace, "--seed", "7", "--out", str(tmp_path / run), *small]) == 0
    deterministic = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    ok = bool(equivariant and invariant and clip_ok and isolation_ok and deterministic)
    record_criterion(
        9, ok,
        f"equivariance {equivariant}, readout invariance {invariant}, clip bound after 25 critic steps {clip_ok}, "
        f"G/GNN checksums unchanged {isolation_ok}, identical metrics.csv across seeded runs {deterministic}",
    )
    assert ok


def test_criterion_10_pcap_ingestion(tmp_path):
    packets = [
        (1_700_000_000, 500_000, tcp_frame("192.168.0.5", "93.184.216.34", 50123, 443, flags=0x02, ttl=64, tos=0, total_len=60)),
        (1_700_000_000, 750_000, arp_frame()),
        (1_700_000_001, 0, udp_frame("10.1.1.1", "8.8.8.8", 40000, 53, ttl=128, tos=16, total_len=73)),
        (1_700_000_001, 250_125, tcp_frame("93.184.216.34", "192.168.0.5", 443, 50123, flags=0x12, ttl=55, tos=8, total_len=1500)),
        (1_700_000_002, 1, tcp_frame("192.168.0.5", "93.184.216.34", 50123, 443, flags=0x11, ttl=64, total_len=52)),
    ]
    expected = [
        HeaderRecord("192.168.0.5", "93.184.216.34", 50123, 443, "TCP", 0, "S", 64.0, 0.0, 60.0),
        HeaderRecord("10.1.1.1", "8.8.8.8", 40000, 53, "UDP", 16, "NONE", 128.0, 0.5, 73.0),
        HeaderRecord("93.184.216.34", "192.168.0.5", 443, 50123, "TCP", 8, "SA", 55.0, 0.750125, 1500.0),
        HeaderRecord("192.168.0.5", "93.184.216.34", 50123, 443, "TCP", 0, "FA", 64.0, 1.500001, 52.0),
    ]
    results = []
    for little in (True, False):
        path = tmp_path / f"mix-{little}.pcap"
        path.write_bytes(pcap_bytes(packets, little_endian=little))
        ds = read_pcap(path)
        results.append(ds.records == expected and sum(ds.skipped.values()) == 1)
    ok = all(results)
    record_criterion(10, ok, f"5-frame TCP/UDP/ARP capture decodes exactly: little-endian {results[0]}, big-endian {results[1]}")
    assert ok
