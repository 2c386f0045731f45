import math

import numpy as np
import pytest
import torch

import oracles
from gradcheck import max_relative_error
from salprivacy import detector as det
from salprivacy.core import BoundingBox, Detection
from salprivacy.errors import ConfigMismatch, DegenerateTruth, EmptyDataset
from salprivacy.layers import images_to_tensor, parameter_count, zero_parameters
from salprivacy.training import TrainConfig

TINY = det.DetectorConfig(input_size=32, widths=(4, 4, 4, 4, 4))


def tiny_model(seed=0, dtype=torch.float64):
    return det.build_model(TINY, seed).to(dtype)


def random_image(r, size):
    return r.integers(0, 256, size=(size, size, 3), dtype=np.uint8)


class TestForward:
    @pytest.mark.parametrize("size,expected", [(256, (32, 16, 8)), (128, (16, 8, 4))])
    def test_grid_shapes(self, size, expected):
        cfg = det.DetectorConfig(input_size=size, widths=(4, 4, 8, 8, 8))
        model = det.build_model(cfg, 0)
        grids, latents = det.forward(model, np.zeros((size, size, 3), np.uint8))
        assert [g.raw.shape for g in grids] == [(3, n, n, 5) for n in expected]
        assert [tuple(l.shape) for l in latents] == [(1, c, n, n) for c, n in zip(cfg.latent_channels, expected)]

    def test_zero_parameters_give_zero_outputs(self, rng):
        model = tiny_model()
        zero_parameters(model)
        grids, _ = det.forward(model, random_image(rng, 32))
        assert all(np.all(g.raw == 0) for g in grids)

    def test_wrong_size(self):
        with pytest.raises(ConfigMismatch):
            det.forward(tiny_model(), np.zeros((64, 64, 3), np.uint8))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            det.DetectorConfig(input_size=100)
        with pytest.raises(ValueError):
            det.DetectorConfig(anchor_sizes=(((0, 1), (1, 1), (1, 1)),) * 3)
        with pytest.raises(ValueError):
            det.DetectorConfig(strides=(4, 8, 16))


def single_cell_grids(cfg, values, scale=0, anchor=0, row=0, col=0):
    grids = []
    for s in range(3):
        n = cfg.grid_size(s)
        raw = np.zeros((3, n, n, 5))
        raw[..., 4] = -50.0
        grids.append(det.ScaleGrid(cfg.strides[s], cfg.anchor_sizes[s], raw))
    grids[scale].raw[anchor, row, col] = values
    return grids


class TestDecode:
    cfg = det.DetectorConfig(input_size=64, conf_threshold=0.25)

    def test_center_and_size_and_score(self):
        [d] = det.decode(single_cell_grids(self.cfg, (0, 0, 0, 0, 0), row=2, col=3), self.cfg)
        # sigmoid(0) = 0.5 puts the center mid-cell; exp(0) keeps the 16x16 anchor
        assert d.box.center == (28.0, 20.0)
        assert (d.box.width, d.box.height) == (16.0, 16.0)
        assert d.score == 0.5

    def test_cell_origin_center(self):
        [d] = det.decode(single_cell_grids(self.cfg, (0, 0, 0, 0, 0)), self.cfg)
        # the box is clipped at the frame, so reconstruct the center from the far edges
        assert (d.box.x_max - 8, d.box.y_max - 8) == (4.0, 4.0)
        assert d.box.as_list() == [0.0, 0.0, 12.0, 12.0]

    def test_threshold(self):
        assert det.decode(single_cell_grids(self.cfg, (0, 0, 0, 0, -1.2)), self.cfg) == []
        cfg = det.DetectorConfig(input_size=64, conf_threshold=0.0)
        assert len(det.decode(single_cell_grids(cfg, (0, 0, 0, 0, -50)), cfg)) == 3 * (64 + 16 + 4)

    def test_boxes_clipped_to_frame(self):
        [d] = det.decode(single_cell_grids(self.cfg, (5, 5, 3, 3, 5), scale=2, row=1, col=1), self.cfg)
        assert d.box.as_list() == [0.0, 0.0, 64.0, 64.0]


class TestEncodeDecode:
    @pytest.mark.parametrize("seed", range(5))
    def test_round_trip(self, seed):
        cfg = det.DetectorConfig(input_size=128, conf_threshold=0.5)
        r = np.random.default_rng(seed)
        for _ in range(40):
            w, h = r.uniform(6, 100, 2)
            x, y = r.uniform(0, 128 - w), r.uniform(0, 128 - h)
            box = BoundingBox(x, y, x + w, y + h)
            grids, _ = det.encode(box, cfg)
            [d] = det.decode(grids, cfg)
            assert np.allclose(d.box.as_list(), box.as_list(), atol=1e-4)


class TestNms:
    def test_single(self):
        d = Detection(BoundingBox(0, 0, 1, 1), 0.3)
        assert det.nms([d], 0.5) == [d]

    def test_identical_boxes(self):
        a = Detection(BoundingBox(0, 0, 4, 4), 0.9)
        b = Detection(BoundingBox(0, 0, 4, 4), 0.8)
        assert det.nms([b, a], 0.5) == [a]

    def test_tie_break(self):
        a = Detection(BoundingBox(1, 0, 5, 4), 0.5)
        b = Detection(BoundingBox(0, 0, 4, 4), 0.5)
        assert det.nms([a, b], 0.5) == [b]

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_greedy_oracles(self, seed):
        r = np.random.default_rng(seed)
        dets = []
        for _ in range(10):
            x, y = r.uniform(0, 12, 2)
            dets.append(Detection(BoundingBox(x, y, x + r.uniform(2, 8), y + r.uniform(2, 8)), float(r.choice([0.3, 0.5, r.random()]))))
        thr = float(r.uniform(0.1, 0.9))
        kept = det.nms(dets, thr)
        tuples = [(*d.box.as_list(), d.score) for d in dets]
        kept_t = [(*d.box.as_list(), d.score) for d in kept]
        assert kept_t == oracles.nms_matrix(tuples, thr)
        assert oracles.nms_is_greedy(tuples, kept_t, thr)
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)


def raw_from_grids(cfg, values_per_scale):
    return [torch.tensor(v)[None] for v in values_per_scale]


def oracle_loss(raw, truths, cfg):
    """Every anchor term written out with scalar arithmetic."""
    def assign(t):
        best = None
        for s in range(3):
            for a, (aw, ah) in enumerate(cfg.anchor_sizes[s]):
                w, h = t[2] - t[0], t[3] - t[1]
                inter = min(w, aw) * min(h, ah)
                v = inter / (w * h + aw * ah - inter)
                if best is None or v > best[0]:
                    best = (v, s, a)
        _, s, a = best
        st = cfg.strides[s]
        cx, cy = (t[0] + t[2]) / 2, (t[1] + t[3]) / 2
        col, row = int(cx // st), int(cy // st)
        return (s, a, row, col), (cx / st - col, cy / st - row, math.log((t[2] - t[0]) / cfg.anchor_sizes[s][a][0]), math.log((t[3] - t[1]) / cfg.anchor_sizes[s][a][1]))

    positives = dict(assign(t) for t in truths)
    total = 0.0
    for s in range(3):
        st = cfg.strides[s]
        n = cfg.grid_size(s)
        for a, (aw, ah) in enumerate(cfg.anchor_sizes[s]):
            for row in range(n):
                for col in range(n):
                    tx, ty, tw, th, to = (float(v) for v in raw[s][a, row, col])
                    key = (s, a, row, col)
                    if key in positives:
                        ox, oy, lw, lh = positives[key]
                        total += oracles.bce(oracles.sigmoid(to), 1.0)
                        total += (oracles.sigmoid(tx) - ox) ** 2 + (oracles.sigmoid(ty) - oy) ** 2
                        total += (tw - lw) ** 2 + (th - lh) ** 2
                        continue
                    cx, cy = (col + 0.5) * st, (row + 0.5) * st
                    prior = (cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2)
                    if all(oracles.box_iou(prior, t) < cfg.ignore_iou for t in truths):
                        total += oracles.bce(oracles.sigmoid(to), 0.0)
    return total


class TestLoss:
    def test_no_truth_confident_negatives(self):
        cfg = TINY
        raw = [torch.zeros(1, 3, n, n, 5, dtype=torch.float64) for n in (4, 2, 1)]
        for r in raw:
            r[..., 4] = -40.0
        targets = det.stack_targets([det.build_targets([], cfg)], torch.float64)
        assert det.loss(raw, targets).item() < 1e-15

    def test_exact_positive_has_zero_coordinate_error(self):
        cfg = TINY
        box = BoundingBox(3.0, 5.0, 21.0, 17.0)
        grids, asg = det.encode(box, cfg, t_obj=40.0)
        for g in grids:
            g.raw[..., 4] = np.where(g.raw[..., 4] == 40.0, 40.0, -40.0)
        raw = [torch.tensor(g.raw)[None] for g in grids]
        targets = det.build_targets([box], cfg)
        # ignored anchors carry no loss, all others are confidently right
        loss = det.loss(raw, det.stack_targets([targets], torch.float64)).item()
        assert loss < 1e-12

    def test_matches_scalar_oracle(self):
        cfg = TINY
        r = np.random.default_rng(7)
        raw_np = [r.normal(0, 1, (3, n, n, 5)) for n in (4, 2, 1)]
        truths = [BoundingBox(4.0, 6.0, 20.0, 18.0)]
        got = det.loss([torch.tensor(v)[None] for v in raw_np], det.stack_targets([det.build_targets(truths, cfg)], torch.float64))
        expected = oracle_loss(raw_np, [t.as_list() for t in truths], cfg)
        assert got.item() == pytest.approx(expected, rel=1e-12)

    def test_matches_scalar_oracle_several_truths(self):
        cfg = det.DetectorConfig(input_size=64, widths=(4, 4, 4, 4, 4))
        r = np.random.default_rng(8)
        raw_np = [r.normal(0, 2, (3, n, n, 5)) for n in (8, 4, 2)]
        truths = [BoundingBox(2, 3, 14, 20), BoundingBox(30, 30, 62, 50), BoundingBox(40, 2, 50, 30)]
        got = det.loss([torch.tensor(v)[None] for v in raw_np], det.stack_targets([det.build_targets(truths, cfg)], torch.float64))
        assert got.item() == pytest.approx(oracle_loss(raw_np, [t.as_list() for t in truths], cfg), rel=1e-12)

    def test_degenerate_truth(self):
        with pytest.raises(DegenerateTruth):
            det.build_targets([BoundingBox(40, 40, 50, 50)], TINY)

    def test_gradient_check(self, rng):
        model = tiny_model()
        assert parameter_count(model) <= 5000
        images = images_to_tensor([random_image(rng, 32) for _ in range(2)], torch.float64)
        targets = det.stack_targets(
            [det.build_targets(t, TINY) for t in ([BoundingBox(3, 4, 19, 20)], [BoundingBox(10, 2, 30, 14), BoundingBox(0, 20, 8, 30)])],
            torch.float64,
        )
        err = max_relative_error(lambda: det.loss(model(images)[0], targets), list(model.parameters()))
        assert err < 1e-4


def one_sample(size=64, seed=0):
    r = np.random.default_rng(seed)
    image = np.full((size, size, 3), 120, np.uint8)
    image[10:30, 20:44] = r.integers(60, 200, size=(20, 24, 3))
    return image, [BoundingBox(20, 10, 44, 30)]


SMALL = det.DetectorConfig(input_size=64, widths=(8, 8, 16, 16, 16))


class TestTrain:
    def test_zero_epochs_keeps_initialisation(self):
        state = det.train([one_sample()], SMALL, 0, seed=3)
        fresh = det.build_model(SMALL, 3)
        for a, b in zip(state.model.state_dict().values(), fresh.state_dict().values()):
            assert torch.equal(a, b)
        assert state.epoch == 0 and state.loss_log == []

    def test_overfit_one_image(self):
        state = det.train([one_sample()], SMALL, 200, seed=0, tcfg=TrainConfig(lr=2e-3, batch_size=1, hflip=False))
        assert state.loss_log[-1] <= 0.5 * state.loss_log[0]

    def test_deterministic(self):
        samples = [one_sample(seed=s) for s in range(3)]
        a = det.train(samples, SMALL, 3, seed=5, tcfg=TrainConfig(batch_size=2))
        b = det.train(samples, SMALL, 3, seed=5, tcfg=TrainConfig(batch_size=2))
        assert a.loss_log == b.loss_log
        for x, y in zip(a.model.state_dict().values(), b.model.state_dict().values()):
            assert torch.equal(x, y)

    def test_resume_equals_uninterrupted(self):
        samples = [one_sample(seed=s) for s in range(3)]
        tcfg = TrainConfig(batch_size=2)
        full = det.train(samples, SMALL, 2, seed=1, tcfg=tcfg)
        half = det.train(samples, SMALL, 1, seed=1, tcfg=tcfg)
        half = det.train(samples, SMALL, 1, seed=1, tcfg=tcfg, state=half)
        assert full.loss_log == half.loss_log

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            det.train([], SMALL, 1, seed=0)

    def test_detector_interface(self):
        state = det.train([one_sample()], SMALL, 0, seed=0)
        out = det.Detector(state.model).detect(one_sample()[0])
        assert all(isinstance(d, Detection) for d in out)
