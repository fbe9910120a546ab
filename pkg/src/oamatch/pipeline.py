"""End-to-end matcher: backbone -> EITM -> OAPM -> OATM -> proposal -> refinement."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attention, backbone, matching, oapm, supervision
from .attention import Block
from .backbone import GRID, BackboneParams
from .config import PipelineConfig
from .matching import CoarseMatchSet, FineMatchSet, RefinementParams
from .nn import assign_tensors, named_tensors
from .tensor import Tensor, backward, load_weights, no_grad, save_weights

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class MatcherWeights:
    backbone: BackboneParams
    eitm: list[Block]
    oatm: list[Block]
    refine: RefinementParams

    def named(self) -> dict[str, Tensor]:
        return named_tensors(self)

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def save(self, path: str | Path) -> None:
        save_weights(self.named(), path)


def init_weights(config: PipelineConfig, seed: int | None = None) -> MatcherWeights:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return MatcherWeights(
        backbone=backbone.init_backbone(rng, config.backbone_width, config.c_fine, config.c_coarse),
        eitm=attention.init_blocks(rng, config.l1, config.c_coarse, config.gamma, use_depthwise=True),
        oatm=attention.init_blocks(rng, config.l2, config.c_coarse, config.gamma, use_depthwise=False),
        refine=matching.init_refinement(rng, config.l3, config.c_fine, config.gamma),
    )


def load_matcher_weights(path: str | Path, config: PipelineConfig) -> MatcherWeights:
    weights = init_weights(config)
    assign_tensors(weights, load_weights(path))
    return weights


@dataclass
class ForwardState:
    """Every intermediate of one forward pass; tensors keep their graph when grads are on."""

    image_shape: tuple[int, int]
    grid: tuple[int, int]
    keypoints: np.ndarray
    assignment: oapm.AssignmentMatrix
    pm_a: np.ndarray
    pm_b: np.ndarray
    cm_a: oapm.CoVisibleMask
    cm_b: oapm.CoVisibleMask
    assignment_oa: oapm.AssignmentMatrix
    coarse: CoarseMatchSet
    theta: Tensor | None
    conf: Tensor | None
    matches: FineMatchSet
    timings: dict[str, float] = field(default_factory=dict)


@dataclass
class MatchResult:
    matches: FineMatchSet
    coarse: CoarseMatchSet
    cm_a: oapm.CoVisibleMask
    cm_b: oapm.CoVisibleMask
    pm_a: np.ndarray
    pm_b: np.ndarray
    assignment: np.ndarray
    assignment_oa: np.ndarray
    covisible_indices: tuple[np.ndarray, np.ndarray]
    timings: dict[str, float]


def _stage(name, timings):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, exc_type, exc, tb):
            timings[name] = time.perf_counter() - self.t0
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc

    return _Timer()


def run(pair, weights: MatcherWeights, config: PipelineConfig, trace: list | None = None) -> ForwardState:
    img_a, img_b = (np.asarray(im, dtype=np.float64) for im in pair)
    timings: dict[str, float] = {}
    with _stage("backbone", timings):
        pyr_a, pyr_b = backbone.encode((img_a, img_b), weights.backbone)
        h, w = img_a.shape[:2]
        grid = (h // GRID, w // GRID)
        kps = backbone.grid_keypoints(h, w)
        fa = backbone.flatten_coarse(pyr_a.coarse)
        fb = backbone.flatten_coarse(pyr_b.coarse)
        if config.positional_encoding:
            pe = attention.sinusoidal_encoding(config.c_coarse, *grid)
            fa, fb = fa + pe, fb + pe
    with _stage("eitm", timings):
        fa, fb = attention.eitm(fa, fb, weights.eitm, grid, trace)
    with _stage("oapm", timings):
        assign = oapm.score_and_assign(fa, fb)
        pm_a, pm_b = oapm.probability_maps(assign.assignment.data, grid)
        cm_a = oapm.covisible_mask(pm_a, config.close_kernel)
        cm_b = oapm.covisible_mask(pm_b, config.close_kernel)
        kp_a, fa_oa, idx_a = oapm.select_covisible(fa, kps, cm_a)
        kp_b, fb_oa, idx_b = oapm.select_covisible(fb, kps, cm_b)
    with _stage("oatm", timings):
        fa_oa, fb_oa = attention.oatm(fa_oa, fb_oa, weights.oatm)
    with _stage("proposal", timings):
        assign_oa = oapm.score_and_assign(fa_oa, fb_oa)
        pairs = matching.propose_coarse(assign_oa.assignment.data, config.rho)
        coarse = matching.coarse_to_keypoints(pairs, kp_a, kp_b, assign_oa.assignment.data)
    theta = conf = None
    with _stage("refinement", timings):
        if len(coarse):
            win_a = matching.crop_windows(pyr_a.fine, coarse.coords_a, config.window)
            win_b = matching.crop_windows(pyr_b.fine, coarse.coords_b, config.window)
            theta, conf = matching.refine(win_a, win_b, weights.refine)
            fine = matching.fine_matches(coarse, theta, conf, (h, w))
        else:
            fine = matching.empty_fine_matches()
    return ForwardState((h, w), grid, kps, assign, pm_a, pm_b, cm_a, cm_b, assign_oa, coarse, theta, conf, fine, timings)


def forward(pair, weights: MatcherWeights, config: PipelineConfig) -> MatchResult:
    with no_grad():
        st = run(pair, weights, config)
    return MatchResult(
        matches=st.matches,
        coarse=st.coarse,
        cm_a=st.cm_a,
        cm_b=st.cm_b,
        pm_a=st.pm_a,
        pm_b=st.pm_b,
        assignment=st.assignment.assignment.data,
        assignment_oa=st.assignment_oa.assignment.data,
        covisible_indices=(st.cm_a.indices, st.cm_b.indices),
        timings=st.timings,
    )


# ---------------------------------------------------------------- supervision


@dataclass
class TrainingSample:
    pair: tuple[np.ndarray, np.ndarray]
    gt: np.ndarray
    lc: np.ndarray
    warp_ab: object  # callable points -> (proj, valid)


def make_sample(synthetic, config: PipelineConfig) -> TrainingSample:
    h, w = synthetic.shape
    grid = (h // GRID, w // GRID)
    kps = backbone.grid_keypoints(h, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", supervision.SupervisionWarning)
        labels, lc = supervision.make_gt_from_warps(
            kps, kps, synthetic.warp_ab, synthetic.warp_ba, grid, grid, config.kappa
        )
    return TrainingSample((synthetic.img_a, synthetic.img_b), labels.gt, lc, synthetic.warp_ab)


def offset_targets(state: ForwardState, warp_ab) -> np.ndarray:
    """Target offsets P_B^gt - P_B^c; unwarpable matches get +inf so they are discarded."""
    proj, valid = warp_ab(state.coarse.coords_a)
    tgt = proj - state.coarse.coords_b
    tgt[~valid] = np.inf
    return tgt


def compute_losses(state: ForwardState, sample: TrainingSample, config: PipelineConfig) -> supervision.LossBundle:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", supervision.SupervisionWarning)
        l_e = supervision.loss_entire(state.assignment.assignment, sample.gt, sample.lc)
        l_a = supervision.loss_overlap(
            state.assignment_oa.assignment, state.cm_a.indices, state.cm_b.indices, sample.gt, sample.lc
        )
        if state.theta is not None:
            tgt = offset_targets(state, sample.warp_ab)
            l_o = supervision.loss_offset(state.theta, tgt, config.eta)
            c_gt = supervision.offset_keep(tgt, config.eta).astype(np.float64)
            l_c = supervision.loss_confidence(state.conf, c_gt)
        else:
            l_o = l_c = Tensor(0.0)
    return supervision.LossBundle(l_e, l_a, l_o, l_c, config.alpha)


def loss_and_state(sample: TrainingSample, weights: MatcherWeights, config: PipelineConfig):
    state = run(sample.pair, weights, config)
    bundle = compute_losses(state, sample, config)
    return supervision.total_loss(bundle), bundle, state


# ---------------------------------------------------------------- training


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    weights: MatcherWeights
    losses: list[float]
    components: list[dict[str, float]]


def train_toy(
    dataset,
    config: PipelineConfig,
    steps: int,
    learning_rate: float | None = None,
    weights: MatcherWeights | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Full-batch Adam on the total loss, cycling through ``dataset`` one pair per step."""
    if not dataset:
        raise ValueError("dataset is empty")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    lr = config.learning_rate if learning_rate is None else learning_rate
    weights = weights or init_weights(config)
    samples = [s if isinstance(s, TrainingSample) else make_sample(s, config) for s in dataset]
    params = weights.parameters()
    opt = Adam(params, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
    losses, comps = [], []
    for step in range(steps):
        sample = samples[step % len(samples)]
        for p in params:
            p.zero_grad()
        loss, bundle, _ = loss_and_state(sample, weights, config)
        parts = bundle.components()
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}: {parts}")
        losses.append(loss.item())
        comps.append(parts)
        backward(loss)
        if lr != 0.0:
            opt.step()
        if log_every and step % log_every == 0:
            logger.info("step %d loss %.6f %s", step, loss.item(), parts)
    return TrainResult(weights, losses, comps)


def match_errors(result: MatchResult, warp_ab) -> np.ndarray:
    """Euclidean distance of each fine match to the true position of its first-image point."""
    if len(result.matches) == 0:
        return np.zeros(0)
    proj, valid = warp_ab(result.matches.coords_a)
    err = np.linalg.norm(proj - result.matches.coords_b, axis=1)
    err[~valid] = np.inf
    return err
