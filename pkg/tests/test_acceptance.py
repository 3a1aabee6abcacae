"""End-to-end acceptance suite; one summary line per criterion is printed at the end of the run.

Training-heavy criteria (6-8) share runs through a module cache. Setting
``OVP_ACCEPTANCE_CACHE`` to a directory keeps the checkpoints between sessions.
"""

import itertools
import math
import os
import time
from fractions import Fraction
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record_criterion, small_config
from ovpanoptic.checkpoint import load_checkpoint
from ovpanoptic.classifier import GroundingItem, category_loss, grounding_loss
from ovpanoptic.cli import main as cli_main
from ovpanoptic.config import load_config
from ovpanoptic.data import generate_synthetic_dataset, id2rgb, read_coco_panoptic, rgb2id, write_coco_panoptic
from ovpanoptic.diffusion import NoiseSchedule, add_noise, alpha_bar
from ovpanoptic.encoders import Vocabulary
from ovpanoptic.inference import fuse_predictions
from ovpanoptic.masks import Assignment, GroundTruthMasks, MaskSet, assign, mask_loss
from ovpanoptic.metrics import average_recall, mask_map, mean_iou, panoptic_quality, pq_stat_single
from ovpanoptic.model import OpenVocabSegmenter
from ovpanoptic.training import evaluate, load_dataset, train

from test_metrics import VOCAB as HAND_VOCAB
from test_metrics import as_tuple, exhaustive_stat, hand_fixture, perturb, random_map

CONFIGS = Path(__file__).resolve().parent / "overfit"
TITLES = {
    1: "noise process exactness",
    2: "gradient suite",
    3: "matching oracle",
    4: "trivial-loss identities",
    5: "metric oracles",
    6: "end-to-end overfit",
    7: "open-vocabulary contract",
    8: "ablation orderings",
    9: "COCO panoptic interop",
    10: "reproducibility",
}


@contextmanager
def criterion(number: int, part: str):
    detail: dict[str, str] = {}
    try:
        yield detail
    except BaseException:
        record_criterion(number, TITLES[number], part, False, ", ".join(f"{k}={v}" for k, v in detail.items()))
        raise
    record_criterion(number, TITLES[number], part, True, ", ".join(f"{k}={v}" for k, v in detail.items()))


# ------------------------------------------------------------------ 1


def test_c1_noise_process():
    start = time.perf_counter()
    with criterion(1, "noise") as d:
        sched = NoiseSchedule.linear()
        x = torch.randn(3, 8, 8, dtype=torch.float64)
        out = add_noise(x, 0, torch.randn_like(x), sched)
        assert torch.equal(out, x)

        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            t = int(rng.integers(0, 1001))
            xs = torch.from_numpy(rng.normal(size=(4, 8, 8)))
            eps = torch.from_numpy(rng.normal(size=(4, 8, 8)))
            ab = alpha_bar(sched, t)
            rec = (add_noise(xs, t, eps, sched) - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
            worst = max(worst, float(torch.linalg.norm(rec - xs) / torch.linalg.norm(xs)))
        d["inversion_rel_err"] = f"{worst:.1e}"
        assert worst <= 1e-6

        # moments of x_t for a fixed x over 1e4 noise draws
        n, ab = 10_000, alpha_bar(sched, 500)
        x0 = torch.full((n,), 0.8, dtype=torch.float64)
        eps = torch.from_numpy(np.random.default_rng(1).normal(size=n))
        xt = add_noise(x0, 500, eps, sched)
        mean_se = math.sqrt((1 - ab) / n)
        var_se = (1 - ab) * math.sqrt(2 / (n - 1))
        d["mean_z"] = f"{abs(float(xt.mean()) - math.sqrt(ab) * 0.8) / mean_se:.2f}"
        d["var_z"] = f"{abs(float(xt.var()) - (1 - ab)) / var_se:.2f}"
        assert abs(float(xt.mean()) - math.sqrt(ab) * 0.8) <= 3 * mean_se
        assert abs(float(xt.var()) - (1 - ab)) <= 3 * var_se
        elapsed = time.perf_counter() - start
        d["seconds"] = f"{elapsed:.1f}"
        assert elapsed < 30


# ------------------------------------------------------------------ 2


def _gradcheck(f, inputs):
    return torch.autograd.gradcheck(f, inputs, eps=1e-6, atol=1e-9, rtol=1e-3)


def test_c2_gradients():
    start = time.perf_counter()
    g = torch.Generator().manual_seed(0)
    with criterion(2, "mask_loss"):
        logits = torch.randn(3, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
        gt = GroundTruthMasks((torch.rand(2, 8, 8, generator=g) > 0.5).double())
        a = Assignment([(2, 0), (0, 1)], [1])
        assert _gradcheck(lambda x: mask_loss(MaskSet(x, torch.zeros(3, 4, dtype=torch.float64)), gt, a), (logits,))

    def unit(*shape):
        return torch.nn.functional.normalize(torch.randn(*shape, generator=g, dtype=torch.float64), dim=-1)

    with criterion(2, "category_loss"):
        z = unit(5, 8).requires_grad_(True)
        rows = unit(4, 8)
        null = unit(8).requires_grad_(True)
        log_tau = torch.tensor(math.log(0.2), dtype=torch.float64, requires_grad=True)
        a = Assignment([(1, 0), (3, 1)], [0, 2, 4])
        labels = torch.tensor([2, 0])
        assert _gradcheck(lambda z, lt, n: category_loss(z, labels, a, rows, lt.exp(), n, 0.1), (z, log_tau, null))

    with criterion(2, "grounding_loss"):
        zs = [unit(4, 8).requires_grad_(True) for _ in range(3)]
        words = [unit(k, 8) for k in (1, 2, 3)]
        lt = torch.tensor(math.log(0.3), dtype=torch.float64, requires_grad=True)
        lc = torch.tensor(math.log(0.5), dtype=torch.float64, requires_grad=True)

        def f(z0, z1, z2, lt, lc):
            return grounding_loss([GroundingItem(a, w) for a, w in zip((z0, z1, z2), words)], lt.exp(), lc.exp())

        assert _gradcheck(f, (*zs, lt, lc))

    with criterion(2, "captioner_path") as d:
        model = OpenVocabSegmenter(small_config(dtype="float64")).eval()
        x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        name = "captioner.mlp.0.bias"
        params = dict(model.extractor.named_parameters())
        weights = None

        def f(bias):
            nonlocal weights
            pyr = torch.func.functional_call(model.extractor, {**params, name: bias}, (x, model.spec, 0))
            flat = torch.cat([lvl.flatten() for lvl in pyr.levels])
            if weights is None:
                weights = torch.randn(flat.shape, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
            return (flat * weights).sum()

        bias = params[name].detach().clone().requires_grad_(True)
        assert _gradcheck(f, (bias,))
        assert torch.autograd.grad(f(bias), bias)[0].abs().max() > 0
        elapsed = time.perf_counter() - start
        d["seconds"] = f"{elapsed:.1f}"
        assert elapsed < 120


# ------------------------------------------------------------------ 3


def test_c3_matching_oracle():
    start = time.perf_counter()
    with criterion(3, "hungarian_vs_permutations") as d:
        rng = np.random.default_rng(11)
        for _ in range(100):
            n = int(rng.integers(1, 7))
            m = int(rng.integers(1, n + 1))
            # integer costs make the comparison exact
            cost = rng.integers(0, 50, size=(n, m)).astype(np.float64)
            got = sum(cost[q, t] for q, t in assign(cost).pairs)
            best = min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))
            assert got == best
        elapsed = time.perf_counter() - start
        d["seconds"] = f"{elapsed:.1f}"
        assert elapsed < 10


# ------------------------------------------------------------------ 4


def test_c4_trivial_identities():
    g = torch.Generator().manual_seed(1)
    with criterion(4, "grounding_B1"):
        item = GroundingItem(torch.randn(5, 8, generator=g, dtype=torch.float64),
                             torch.randn(3, 8, generator=g, dtype=torch.float64))
        assert float(grounding_loss([item], 0.07, 0.07)) == 0.0
    with criterion(4, "uniform_ce") as d:
        k, dim = 5, 8
        eye = torch.eye(dim, dtype=torch.float64)
        rows, null, z = eye[:k], eye[k], eye[k + 1].expand(4, dim)
        loss = category_loss(z, torch.tensor([1, 3]), Assignment([(0, 0), (2, 1)], [1, 3]), rows, 0.07, null, 0.1)
        d["err"] = f"{abs(float(loss) - math.log(k + 1)):.1e}"
        assert abs(float(loss) - math.log(k + 1)) <= 1e-9
    with criterion(4, "fusion_endpoints") as d:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            worst = max(worst, np.abs(fuse_predictions(p, q, 1.0) - p / p.sum()).max(),
                        np.abs(fuse_predictions(p, q, 0.0) - q / q.sum()).max())
        d["max_err"] = f"{worst:.1e}"
        assert worst <= 1e-12


# ------------------------------------------------------------------ 5


def test_c5_metric_oracles():
    start = time.perf_counter()
    with criterion(5, "hand_fixture"):
        pred, gt = hand_fixture()
        s = pq_stat_single(pred, gt, len(HAND_VOCAB))[0]
        assert (s.pq, s.sq, s.rq) == (Fraction(2, 5), Fraction(3, 5), Fraction(2, 3))
        assert panoptic_quality(pred, gt, HAND_VOCAB).pq == pytest.approx(62.5, abs=1e-12)
    with criterion(5, "pq_eq_sq_rq"):
        rng = np.random.default_rng(5)
        for _ in range(200):
            g = random_map(rng)
            for st in pq_stat_single(perturb(rng, g), g).per_cat.values():
                if st.tp:
                    assert abs(float(st.pq) - float(st.sq) * float(st.rq)) <= 1e-9
    with criterion(5, "perfect_100"):
        _, gt = hand_fixture()
        masks, cats, _ = gt.masks()
        sem = np.where(gt.segment_ids == 1, 0, 2)
        assert panoptic_quality(gt, gt, HAND_VOCAB).pq == 100.0
        assert mean_iou(sem, sem, HAND_VOCAB)[0] == 100.0
        assert average_recall(list(masks), list(masks), 100) == 100.0
        assert mask_map([(m, c, 1.0) for m, c in zip(masks, cats)], list(zip(masks, cats))) == 100.0
    with criterion(5, "greedy_vs_exhaustive") as d:
        rng = np.random.default_rng(7)
        for _ in range(200):
            g = random_map(rng)
            p = perturb(rng, g)
            assert as_tuple(pq_stat_single(p, g)) == exhaustive_stat(p, g)
        elapsed = time.perf_counter() - start
        d["seconds"] = f"{elapsed:.1f}"
        assert elapsed < 60


# ------------------------------------------------------------------ 6-8


class Runs:
    """Trains each named overfit variant once per session."""

    def __init__(self):
        self.results = {}
        self.seconds = {}
        cache = os.environ.get("OVP_ACCEPTANCE_CACHE")
        self.cache = Path(cache) if cache else None

    def config(self, name):
        base = "caption.yaml" if name == "caption" else "label.yaml"
        overrides = {"label_empty": ["captioner.mode=empty"], "label_t500": ["timesteps=[500]"]}.get(name, [])
        return load_config(CONFIGS / base, overrides, environ={})

    def model(self, name):
        if name not in self.results:
            cfg = self.config(name)
            out = self.cache / name if self.cache else None
            start = time.perf_counter()
            if out is not None and (out / "final.ckpt").exists():
                ckpt = load_checkpoint(out / "final.ckpt")
                if ckpt.config_hash == cfg.hash():
                    self.results[name] = OpenVocabSegmenter.from_checkpoint(ckpt, cfg)
            if name not in self.results:
                self.results[name] = train(cfg, out_dir=out).model
            self.seconds[name] = time.perf_counter() - start
        return self.results[name]

    def pq(self, name, vocab=None):
        model = self.model(name)
        ds = load_dataset(model.config)
        rep = evaluate(model, ds, vocab or ds.vocabulary(model.config.templates))
        return rep


@pytest.fixture(scope="module")
def runs():
    return Runs()


@pytest.mark.slow
def test_c6_overfit_label(runs):
    with criterion(6, "label") as d:
        cfg = runs.config("label")
        assert (cfg.data.num_images, cfg.data.image_size, cfg.masks.num_queries, cfg.seed) == (16, 64, 20, 0)
        assert (len(cfg.data.things), len(cfg.data.stuff)) == (4, 2) and cfg.optim.iterations <= 2000
        pq = runs.pq("label")["summary"]["PQ"]
        d["PQ"] = f"{pq:.1f}"
        d["train_s"] = f"{runs.seconds['label']:.0f}"
        assert pq >= 90


@pytest.mark.slow
def test_c6_overfit_caption(runs):
    with criterion(6, "caption") as d:
        cfg = runs.config("caption")
        assert cfg.supervision == "caption" and cfg.optim.iterations <= 2000
        pq = runs.pq("caption")["summary"]["PQ"]
        d["PQ"] = f"{pq:.1f}"
        d["train_s"] = f"{runs.seconds['caption']:.0f}"
        assert pq >= 75
        assert runs.seconds["label"] + runs.seconds["caption"] < 90 * 60


SYNONYMS = {"square": "box", "circle": "disk", "triangle": "wedge", "diamond": "rhombus",
            "grass": "lawn", "sky": "heavens"}
DISTRACTORS = [("star", True), ("hexagon", True), ("road", False), ("snow", False)]


@pytest.mark.slow
def test_c7_open_vocabulary(runs):
    model = runs.model("label")
    ds = load_dataset(model.config)
    vocab = ds.vocabulary(model.config.templates)
    base = evaluate(model, ds, vocab)
    with criterion(7, "synonyms") as d:
        syn = Vocabulary([SYNONYMS[n] for n in vocab.names], vocab.isthing, vocab.templates)
        assert torch.equal(model.vocabulary_embedding(syn), model.vocabulary_embedding(vocab))
        rep = evaluate(model, ds, syn)
        d["dPQ"] = f"{abs(rep['summary']['PQ'] - base['summary']['PQ']):.1e}"
        for a, b in zip(rep["predictions"], base["predictions"]):
            assert np.array_equal(a.segment_ids, b.segment_ids)
        assert abs(rep["summary"]["PQ"] - base["summary"]["PQ"]) <= 1e-9
    with criterion(7, "distractors") as d:
        big = Vocabulary(vocab.names + [n for n, _ in DISTRACTORS], vocab.isthing + [t for _, t in DISTRACTORS],
                         vocab.templates)
        emb = model.vocabulary_embedding(big)
        sims = emb[len(vocab):] @ emb.T
        for i in range(len(DISTRACTORS)):
            sims[i, len(vocab) + i] = -1
        assert float(sims.max()) < 1 - 1e-6  # distinct embeddings
        rep = evaluate(model, ds, big)
        drop = base["summary"]["PQ"] - rep["summary"]["PQ"]
        d["PQ_drop"] = f"{drop:.2f}"
        assert drop < 5


@pytest.mark.slow
def test_c8a_implicit_vs_empty(runs):
    with criterion(8, "implicit>=empty-1") as d:
        implicit = runs.pq("label")["summary"]["PQ"]
        empty = runs.pq("label_empty")["summary"]["PQ"]
        d["implicit"], d["empty"] = f"{implicit:.1f}", f"{empty:.1f}"
        assert implicit >= empty - 1


@pytest.mark.slow
def test_c8b_t0_vs_t500(runs):
    with criterion(8, "t0>=t500-1") as d:
        t0 = runs.pq("label")["summary"]["PQ"]
        t500 = runs.pq("label_t500")["summary"]["PQ"]
        d["t0"], d["t500"] = f"{t0:.1f}", f"{t500:.1f}"
        assert t0 >= t500 - 1


# ------------------------------------------------------------------ 9


def test_c9_interop(tmp_path):
    with criterion(9, "codec_50_maps"):
        ds = generate_synthetic_dataset(num_images=50, image_size=32, min_size=6, max_size=12, seed=9, max_stuff=2)
        maps = [it.panoptic for it in ds.items]
        write_coco_panoptic(tmp_path, maps, ds.categories, ds.isthing)
        back = read_coco_panoptic(tmp_path)
        assert len(back.items) == 50
        for m, item in zip(maps, back.items):
            assert np.array_equal(item.panoptic.segment_ids, m.segment_ids)
            assert {(x.id, x.category, x.isthing) for x in item.panoptic.segments} == \
                {(x.id, x.category, x.isthing) for x in m.segments}
    with criterion(9, "id2rgb"):
        for sid in (0, 1, 255, 256, 300, 65536):
            r, g, b = (int(v) for v in id2rgb(sid))
            assert (r, g, b) == (sid % 256, (sid // 256) % 256, sid // 65536)
            assert int(rgb2id(np.array([r, g, b], np.uint8))) == sid


# ------------------------------------------------------------------ 10


def test_c10_reproducibility(tmp_path):
    with criterion(10, "identical_logs") as d:
        sets = ["dtype=float64", "data.num_images=4", "data.image_size=32", "data.min_size=8", "data.max_size=12",
                "masks.num_queries=6", "masks.hidden_dim=32", "optim.iterations=6", "optim.batch_size=2",
                "log.every=1", "log.eval_every=3"]
        args = [a for s in sets for a in ("--set", s)]
        assert cli_main(["train", "--out", str(tmp_path / "a")] + args) == 0
        assert cli_main(["train", "--out", str(tmp_path / "b")] + args) == 0
        log_a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        log_b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
        d["records"] = str(len(log_a.splitlines()))
        assert len(log_a.splitlines()) == 8
        assert log_a == log_b
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
