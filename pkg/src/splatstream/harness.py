"""Staged map-sharing experiments: build, enhance, refine, encode, sync,
evaluate, and emit CSV (plus optional SVG plots).

One stage ingests one contributor's frames. New anchors (grid cells first
observed at this stage) ship as a full-map segment; anchors already
published keep their frozen ordering and ship as a quantized increment.
The server adopts the decoded (client-identical) representation after
every stage, so refinement always continues from what clients hold.

Variants: ``baseline`` (no virtual-view supervision, full retransmission),
``+virt`` (adds pseudo ground truth, still full retransmission), ``+incr``
(pseudo ground truth plus increment transmission).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from splatstream.codec.bitstream import (
    DEFAULT_CANDIDATE_STEPS,
    deserialize,
    encode_full_map,
)
from splatstream.core import FrameRGBD, GaussianKind, GaussianMap, slice_anchors
from splatstream.enhance import fit_confidence_predictor, make_pseudo_gt, sample_virtual_poses
from splatstream.increment import (
    StageRecord,
    apply_increment,
    compute_increment,
    decode_increment,
    encode_increment,
)
from splatstream.mapbuild import (
    VoxelGrid,
    assemble_map,
    build_virtual_map,
    classify_seen,
    init_anchors,
    lift_rgbd,
    merge_clouds,
    voxelize,
)
from splatstream.metrics import LossWeights, depth_l1, psnr, ssim
from splatstream.protocol import ServerState, concat_anchored_maps
from splatstream.refine import refine_map
from splatstream.render import RenderConfig, render
from splatstream.scenegen import (
    SyntheticScene,
    generate_eval_views,
    generate_trajectories,
    make_scene,
)

RAW_FLOATS_PER_GAUSSIAN = 14          # 3 pos + 3 scale + 4 rot + 1 opacity + 3 color
CSV_COLUMNS = ("stage", "variant", "set", "psnr_db", "ssim", "depth_l1_cm",
               "bytes", "cum_bytes", "compression_ratio")
VARIANTS = ("baseline", "+virt", "+incr")

# near plane matches the trajectory clearance so sideways surface points
# cannot blow up under the projection Jacobian
FAST_RENDER = RenderConfig(footprint_sigma=6.0, min_transmittance=1e-5,
                           z_near=0.25)


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale defaults sized to finish a full run in about a minute."""

    seed: int = 0
    variant: str = "+incr"
    n_stages: int = 3
    frames_per_contributor: int = 18
    width: int = 48
    height: int = 36
    fov_deg: float = 70.0
    epsilon: float = 0.3
    K: int = 10
    lift_stride: int = 2
    virtual_stride: int = 3
    lambda_q: float = 0.0025
    candidate_steps: tuple = DEFAULT_CANDIDATE_STEPS
    refine_iters: int = 10
    refine_step: float = 0.5
    refine_frames: int = 5
    n_pseudo: int = 4
    n_eval_positions: int = 8
    n_eval_rotations: int = 2
    n_eval_interp: int = 8
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def use_virtual(self) -> bool:
        return self.variant in ("+virt", "+incr")

    @property
    def use_increments(self) -> bool:
        return self.variant == "+incr"

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__
             if k != "weights"}
        d["candidate_steps"] = list(self.candidate_steps)
        return d

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        if str(path).endswith(".toml"):
            import tomllib
            data = tomllib.loads(text)
        else:
            data = json.loads(text)
        if "candidate_steps" in data:
            data["candidate_steps"] = tuple(data["candidate_steps"])
        return cls(**data)


@dataclass
class ExperimentResult:
    records: list
    csv_text: str
    server: ServerState
    scene: SyntheticScene
    eval_interp: list
    eval_extrap: list
    input_frames: list


def _raw_bytes(m: GaussianMap) -> int:
    return int(m.alive.sum()) * RAW_FLOATS_PER_GAUSSIAN * 4


def _evaluate(m: GaussianMap, eval_frames, config) -> dict:
    if not eval_frames:
        return {"psnr_db": 0.0, "ssim": 0.0, "depth_l1_cm": 0.0, "count": 0}
    ps, ss, dl = [], [], []
    for frame in eval_frames:
        out = render(m, frame.pose, config=FAST_RENDER)
        ps.append(psnr(out.color, frame.color))
        ss.append(ssim(out.color, frame.color))
        valid = frame.depth > 0
        dl.append(depth_l1(out.depth, frame.depth, valid))
    return {"psnr_db": float(np.mean(ps)), "ssim": float(np.mean(ss)),
            "depth_l1_cm": float(np.mean(dl)) * 100.0,
            "count": len(eval_frames)}


def _supervision_frames(frames: list, n: int) -> list:
    if len(frames) <= n:
        return list(frames)
    idx = np.linspace(0, len(frames) - 1, n).round().astype(int)
    return [frames[i] for i in idx]


def _pseudo_set(cfg: ExperimentConfig, scene, cumulative_frames, stage: int):
    virtual = build_virtual_map(cumulative_frames, cfg.virtual_stride)
    calib = _supervision_frames(cumulative_frames,
                                min(4, len(cumulative_frames)))
    pairs = [(render(virtual, f.pose, config=FAST_RENDER), f) for f in calib]
    predictor = fit_confidence_predictor(pairs)
    bounds = (scene.room.lo + 0.3, scene.room.hi - 0.3)
    poses, _ = sample_virtual_poses(bounds,
                                    [f.pose for f in cumulative_frames],
                                    cfg.n_pseudo,
                                    rng_seed=cfg.seed * 7919 + 101 + stage)
    pseudo, _ = make_pseudo_gt(virtual, poses, predictor, config=FAST_RENDER)
    return pseudo


def run_experiment(config: ExperimentConfig | None = None) -> ExperimentResult:
    """Run the staged pipeline (see the module docstring) and collect CSV
    rows plus the full server state for downstream protocol use."""
    cfg = config if config is not None else ExperimentConfig()
    scene = make_scene(cfg.seed)
    # dense trajectories: even indices are uploaded, odd are held out as
    # the interpolated evaluation pool (they sit between uploaded poses)
    dense = generate_trajectories(scene, cfg.n_stages,
                                  cfg.frames_per_contributor * 2,
                                  seed=cfg.seed + 1, width=cfg.width,
                                  height=cfg.height, fov_deg=cfg.fov_deg)
    frames = dense[0::2]
    held_out = dense[1::2]
    by_stage = [[f for f in frames if f.contributor_id == s]
                for s in range(cfg.n_stages)]
    all_poses = [f.pose for f in frames]
    from splatstream.enhance import is_far_from_inputs
    interp_pool = [f for f in held_out
                   if not is_far_from_inputs(f.pose, all_poses)]
    eval_interp = _supervision_frames(interp_pool, cfg.n_eval_interp)
    _, eval_extrap = generate_eval_views(
        scene, cfg.n_eval_positions, cfg.n_eval_rotations,
        seed=cfg.seed + 2, input_poses=all_poses, width=cfg.width,
        height=cfg.height, fov_deg=cfg.fov_deg)

    server = ServerState()
    published: GaussianMap | None = None
    known_cells: set = set()
    records = []
    rows = []
    cum_bytes = 0

    for stage in range(cfg.n_stages):
        stage_frames = by_stage[stage]
        cumulative = [f for s in range(stage + 1) for f in by_stage[s]]
        cloud = merge_clouds([lift_rgbd(f, cfg.lift_stride, i)
                              for i, f in enumerate(stage_frames)])
        grid = voxelize(cloud, cfg.epsilon)
        new_cells = sorted(set(grid.occupied) - known_cells)
        known_cells |= set(grid.occupied)
        new_grid = VoxelGrid(cfg.epsilon, frozenset(new_cells))
        new_part = assemble_map(init_anchors(new_grid, cloud, cfg.K,
                                             stage_frames), stage)

        if published is None:
            working = new_part
        else:
            base = published.copy()
            base.stage_id = stage
            working = concat_anchored_maps(base, new_part) \
                if new_part.size else base

        pseudo = _pseudo_set(cfg, scene, cumulative, stage) \
            if cfg.use_virtual else []
        supervision = _supervision_frames(cumulative, cfg.refine_frames)
        refined, _trace = refine_map(working, supervision, pseudo,
                                     cfg.weights, cfg.refine_iters,
                                     cfg.refine_step, config=FAST_RENDER)

        full_bytes_blob, full_decoded = encode_full_map(
            refined, cfg.epsilon, lambda_q=cfg.lambda_q,
            candidate_steps=cfg.candidate_steps)

        if stage == 0 or not cfg.use_increments:
            published = full_decoded
            blobs = {"full": full_bytes_blob}
            transmitted_full, transmitted_inc = len(full_bytes_blob), 0
        else:
            prev = published
            n_prev = prev.anchor_count
            seen_target = slice_anchors(refined, 0, n_prev)
            inc = compute_increment(seen_target, prev)
            inc_blob = encode_increment(inc, cfg.lambda_q,
                                        cfg.candidate_steps,
                                        epsilon=cfg.epsilon,
                                        gaussian_kind=GaussianKind.FLAT2D)
            applied = apply_increment(prev, decode_increment(inc_blob))
            seg_blob = b""
            if refined.anchor_count > n_prev:
                segment = slice_anchors(refined, n_prev,
                                        refined.anchor_count)
                seg_blob, seg_decoded = encode_full_map(
                    segment, cfg.epsilon, lambda_q=cfg.lambda_q,
                    candidate_steps=cfg.candidate_steps)
                published = concat_anchored_maps(applied, seg_decoded)
            else:
                published = applied
            blobs = {"increment": inc_blob, "segment": seg_blob}
            transmitted_full, transmitted_inc = 0, len(inc_blob) + len(seg_blob)

        transmitted = transmitted_full + transmitted_inc
        cum_bytes += transmitted
        seen_flags = classify_seen(grid, cumulative)
        interp_metrics = _evaluate(published, eval_interp, cfg)
        extrap_metrics = _evaluate(published, eval_extrap, cfg)
        record = StageRecord(stage, transmitted_full, transmitted_inc,
                             metrics={"interp": interp_metrics,
                                      "extrap": extrap_metrics,
                                      "paired_full_bytes": len(full_bytes_blob),
                                      "anchors": published.anchor_count})
        server.publish_stage(record, blobs, published, seen_flags)
        server.add_contributor_frames(stage_frames, stage)
        records.append(record)

        ratio = _raw_bytes(published) / max(transmitted, 1)
        for set_name, metrics in (("interp", interp_metrics),
                                  ("extrap", extrap_metrics)):
            rows.append({"stage": stage, "variant": cfg.variant,
                         "set": set_name,
                         "psnr_db": metrics["psnr_db"],
                         "ssim": metrics["ssim"],
                         "depth_l1_cm": metrics["depth_l1_cm"],
                         "bytes": transmitted, "cum_bytes": cum_bytes,
                         "compression_ratio": ratio})

    return ExperimentResult(records, rows_to_csv(rows), server, scene,
                            eval_interp, eval_extrap, frames)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_COLUMNS) + "\n")
    for row in rows:
        cells = []
        for col in CSV_COLUMNS:
            v = row[col]
            cells.append(repr(float(v)) if isinstance(v, float) else str(v))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# rate-distortion sweep
# ---------------------------------------------------------------------------

RD_LAMBDA_SCHEDULE = tuple(round(0.0005 + 0.002 * i, 4) for i in range(11))


def rd_sweep(config: ExperimentConfig | None = None,
             lambda_list=RD_LAMBDA_SCHEDULE, n_eval: int = 6):
    """Encode one built stage at each lambda; rows of (bytes, PSNR, ratio).

    Reuses a single stage-0 build so the sweep isolates the codec
    trade-off. Returns (rows, csv_text).
    """
    cfg = config if config is not None else ExperimentConfig()
    if len(lambda_list) < 1:
        raise ValueError("need at least one lambda")
    one_stage = replace(cfg, n_stages=1, variant=cfg.variant
                        if cfg.variant != "+incr" else "+virt")
    result = run_experiment(one_stage)
    refined = result.server.published_maps[0]
    eval_frames = result.eval_extrap[:n_eval] or result.eval_interp[:n_eval]

    rows = []
    raw = _raw_bytes(refined)
    for lam in lambda_list:
        blob, decoded = encode_full_map(refined, cfg.epsilon, lambda_q=lam,
                                        candidate_steps=cfg.candidate_steps)
        metrics = _evaluate(decoded, eval_frames, cfg)
        rows.append({"lambda_q": lam, "bytes": len(blob),
                     "compression_ratio": raw / len(blob),
                     "psnr_db": metrics["psnr_db"]})
    header = "lambda_q,bytes,compression_ratio,psnr_db\n"
    lines = [f"{r['lambda_q']!r},{r['bytes']},{r['compression_ratio']!r},"
             f"{r['psnr_db']!r}" for r in rows]
    return rows, header + "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plots
# ---------------------------------------------------------------------------

def emit_svg_plot(path, xs, ys, xlabel: str, ylabel: str, title: str) -> None:
    """Single-series line plot; needs matplotlib (the 'plots' extra)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
