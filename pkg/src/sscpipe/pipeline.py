"""End-to-end model assembly, toy training and the ablation harness."""
from __future__ import annotations

import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import depth_volume as dv
from . import fusion as fu
from . import losses as ls
from . import tensor_io
from .autodiff import Adam, Parameter, Tensor
from .camera import canonical_pose
from .config import PipelineConfig
from .geo_context import GcaAdapter
from .scene import UNKNOWN, SyntheticSample, VoxelGrid, make_sample
from .view_transform import VoxelRefiner, lift, propose_queries, voxel_pool

# Full-scale reference numbers from the source experiments (IoU, mIoU).
# They are NOT reproducible at desk scale and are never used as targets.
REFERENCE_DEPTH = {"ddvm": (47.91, 20.36), "ar": (47.76, 19.59)}
REFERENCE_FUSION = {"aaf": (47.91, 20.36), "ca3d": (48.25, 20.08), "none": (47.84, 19.56)}
REFERENCE_NOTE = "reference (not reproducible at desk scale)"


class Pipeline:
    """All learnable components wired together for one configuration."""

    def __init__(self, config: PipelineConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed + 1000)
        c = config.channels
        k = config.total_classes()

        self.gca = GcaAdapter(c, config.gca_config(), rng=rng)
        self.seg_w = Parameter(rng.standard_normal((k, c)) / np.sqrt(c), name="seg.w")
        self.seg_b = Parameter(np.zeros(k), name="seg.b")

        self.mapper = None
        self.phi = None
        if config.depth_strategy in ("ddvm", "refine-off"):
            self.mapper = dv.ChannelMapper(config.d_disp, config.d_depth, rng=rng)
            if config.depth_strategy == "ddvm":
                self.phi = dv.DepthRefiner(rng=rng)

        self.refiner = VoxelRefiner(c, config.refine_config(), rng=rng)

        self.aaf_units = None
        self.ca3d = None
        if config.fusion_strategy == "aaf":
            self.aaf_units = fu.make_aaf_units(c, rng=rng)
        elif config.fusion_strategy == "ca3d":
            self.ca3d = fu.ChannelAttention3d(c, rng=rng)

        self.dec_w = Parameter(rng.standard_normal((c, c, 3, 3, 3)) / np.sqrt(27 * c), name="dec.w")
        self.dec_b = Parameter(np.zeros(c), name="dec.b")
        self.cls_w = Parameter(rng.standard_normal((k, c)) / np.sqrt(c), name="cls.w")
        self.cls_b = Parameter(np.zeros(k), name="cls.b")

    def params(self) -> list[Parameter]:
        ps = self.gca.params() + [self.seg_w, self.seg_b,
                                  self.dec_w, self.dec_b, self.cls_w, self.cls_b]
        ps += self.refiner.params()
        if self.mapper is not None:
            ps += self.mapper.params()
        if self.phi is not None:
            ps += self.phi.params()
        if self.aaf_units is not None:
            for u in self.aaf_units:
                ps += u.params()
        if self.ca3d is not None:
            ps += self.ca3d.params()
        return ps

    # -- forward --------------------------------------------------------------

    def depth_distribution(self, sample: SyntheticSample) -> dv.DepthDistribution:
        bins = self.config.depth_bins()
        strategy = self.config.depth_strategy
        if strategy == "ddvm":
            return dv.ddvm_forward(sample.disparity_volume, self.mapper, self.phi, bins)
        if strategy == "refine-off":
            return dv.ddvm_forward(sample.disparity_volume, self.mapper, None, bins)
        if strategy == "ar":
            return dv.analytical_resample(sample.disparity_volume, sample.rig,
                                          self.config.disp_bins(), bins)
        return dv.onehot_from_depthmap(sample.depth_map, bins)

    def forward(self, sample: SyntheticSample) -> dict:
        cfg = self.config
        c = cfg.channels
        k = cfg.total_classes()
        grid_spec = cfg.grid_spec()
        pose = canonical_pose(grid_spec.origin_m, grid_spec.dims, grid_spec.voxel_size_m)
        h, w = sample.rig.image_h, sample.rig.image_w

        context = self.gca.forward(Tensor(sample.context_features), sample.depth_map)
        seg_flat = ad.matmul(self.seg_w, ad.reshape(context, (c, h * w)))
        seg_logits = ad.reshape(ad.add(seg_flat, ad.reshape(self.seg_b, (k, 1))), (k, h, w))

        dist = self.depth_distribution(sample)
        frustum = lift(context, dist, sample.rig, pose, cfg.depth_bins())
        f_lss = voxel_pool(frustum, grid_spec)
        proposals = propose_queries(sample.depth_map, f_lss, sample.rig, pose,
                                    grid_spec, cap=cfg.cap())
        f_vt = self.refiner.forward(proposals, frustum, grid_spec, sample.rig, pose)

        if cfg.fusion_strategy == "aaf":
            fused = fu.aaf_fuse(f_lss, f_vt, self.aaf_units)
        elif cfg.fusion_strategy == "ca3d":
            fused = fu.channel_attention_3d_fuse(f_lss, f_vt, self.ca3d)
        else:
            fused = fu.passthrough_fuse(f_lss, f_vt)

        hidden = ad.relu(ad.conv3d(fused.features, self.dec_w, self.dec_b))
        n = grid_spec.num_voxels()
        logits_flat = ad.add(ad.matmul(self.cls_w, ad.reshape(hidden, (c, n))),
                             ad.reshape(self.cls_b, (k, 1)))
        logits = ad.reshape(logits_flat, (k,) + tuple(grid_spec.dims))

        return {"logits": logits, "seg_logits": seg_logits, "depth_dist": dist,
                "f_lss": f_lss, "f_vt": f_vt, "fused": fused, "proposals": proposals,
                "frustum": frustum}

    def predict(self, sample: SyntheticSample) -> VoxelGrid:
        out = self.forward(sample)
        labels = np.argmax(out["logits"].data, axis=0).astype(np.uint8)
        spec = self.config.grid_spec()
        return VoxelGrid(spec.dims, spec.origin_m, spec.voxel_size_m, labels)

    # -- losses ----------------------------------------------------------------

    def losses(self, out: dict, sample: SyntheticSample, class_weights: np.ndarray) -> dict:
        cfg = self.config
        logits = out["logits"]
        probs = ad.softmax(logits, axis=0)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            l_ce = ls.weighted_ce(logits, sample.grid, class_weights)
            l_geo = ls.scal_loss(probs, sample.grid, "geo")
            l_sem = ls.scal_loss(probs, sample.grid, "sem")
            l_d = ls.depth_loss(out["depth_dist"], sample.depth_map, cfg.depth_bins())
            l_seg = ls.seg_loss_2d(out["seg_logits"], sample.seg_labels_2d)
        total = ls.total_loss(l_d, l_seg, l_ce, l_geo, l_sem, cfg.loss_weights())
        return {"total": total, "ce": l_ce, "scal_geo": l_geo, "scal_sem": l_sem,
                "depth": l_d, "seg": l_seg}


# ---------------------------------------------------------------------------
# sample generation and training
# ---------------------------------------------------------------------------

def generate_samples(config: PipelineConfig, seeds) -> list[SyntheticSample]:
    return [make_sample(seed=s, dims=config.grid_dims,
                        num_classes=config.total_classes(), rig=config.rig(),
                        disp_bins=config.disp_bins(), embed_dim=config.channels,
                        voxel_size_m=config.voxel_size_m,
                        sharpness=config.cost_sharpness,
                        cost_noise=config.cost_noise,
                        feature_noise=config.feature_noise,
                        cull_occluded=config.cull_occluded)
            for s in seeds]


def training_class_weights(samples: list[SyntheticSample], num_classes: int) -> np.ndarray:
    """Inverse-log weights from class frequencies over the training voxels."""
    counts = np.zeros(num_classes)
    for s in samples:
        labels = s.grid.labels[s.grid.labels != UNKNOWN]
        counts += np.bincount(labels.astype(np.int64), minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1.0)
    return ls.class_weights_from_frequencies(freq)


@dataclass
class TrainResult:
    pipeline: Pipeline
    step0_loss: float
    final_loss: float
    history: list[dict]
    holdout_iou: float
    holdout_miou: float
    diverged: bool = False


def evaluate_pipeline(pipe: Pipeline, samples: list[SyntheticSample]):
    ious, mious = [], []
    for s in samples:
        pred = pipe.predict(s)
        iou, _, miou = ls.evaluate(pred, s.grid, num_classes=pipe.config.total_classes())
        ious.append(iou)
        mious.append(miou)
    return float(np.mean(ious)), float(np.mean(mious))


def mean_total_loss(pipe: Pipeline, samples, class_weights) -> float:
    vals = []
    for s in samples:
        out = pipe.forward(s)
        vals.append(pipe.losses(out, s, class_weights)["total"].item())
    return float(np.mean(vals))


def random_baseline_miou(config: PipelineConfig, samples: list[SyntheticSample],
                         draws: int = 5) -> float:
    """Expected mIoU of uniformly random class predictions on the same scenes."""
    rng = np.random.default_rng(10_000 + config.seed)
    spec = config.grid_spec()
    vals = []
    for s in samples:
        for _ in range(draws):
            labels = rng.integers(0, config.total_classes(), size=spec.dims).astype(np.uint8)
            pred = VoxelGrid(spec.dims, spec.origin_m, spec.voxel_size_m, labels)
            _, _, miou = ls.evaluate(pred, s.grid, num_classes=config.total_classes())
            vals.append(miou)
    return float(np.mean(vals))


def train_toy(config: PipelineConfig, log=None, steps: int | None = None,
              scenes: int | None = None) -> TrainResult:
    """Adam optimization of the full objective on procedurally generated scenes."""
    steps = steps if steps is not None else config.train_steps
    n_scenes = scenes if scenes is not None else config.train_scenes
    pipe = Pipeline(config)
    train_seeds = [config.seed + i for i in range(n_scenes)]
    holdout_seeds = [config.seed + 10_000 + i for i in range(config.holdout_scenes)]
    train_samples = generate_samples(config, train_seeds)
    holdout_samples = generate_samples(config, holdout_seeds)
    class_weights = training_class_weights(train_samples, config.total_classes())

    params = pipe.params()
    opt = Adam(params, lr=config.learning_rate)
    step0 = mean_total_loss(pipe, train_samples, class_weights)
    if log:
        log(f"step 0: mean total loss {step0:.4f} over {n_scenes} scenes")

    history = []
    diverged = False
    snapshot = [p.data.copy() for p in params]
    for step in range(steps):
        sample = train_samples[step % n_scenes]
        out = pipe.forward(sample)
        comp = pipe.losses(out, sample, class_weights)
        total = comp["total"]
        if not np.isfinite(total.item()):
            diverged = True
            for p, saved in zip(params, snapshot):
                p.data = saved
            if log:
                log(f"step {step}: loss diverged, restored last-good parameters")
            break
        snapshot = [p.data.copy() for p in params]
        opt.zero_grad()
        total.backward()
        opt.step()
        record = {k: v.item() for k, v in comp.items()}
        record["step"] = step
        history.append(record)
        if log and (step % 25 == 0 or step == steps - 1):
            log(f"step {step}: total {record['total']:.4f} ce {record['ce']:.4f} "
                f"seg {record['seg']:.4f} depth {record['depth']:.4f} "
                f"geo {record['scal_geo']:.4f} sem {record['scal_sem']:.4f}")

    final = mean_total_loss(pipe, train_samples, class_weights)
    iou, miou = evaluate_pipeline(pipe, holdout_samples)
    if log:
        log(f"final: mean total loss {final:.4f}; holdout IoU {iou:.4f} mIoU {miou:.4f}")
    return TrainResult(pipeline=pipe, step0_loss=step0, final_loss=final,
                       history=history, holdout_iou=iou, holdout_miou=miou,
                       diverged=diverged)


# ---------------------------------------------------------------------------
# checkpointing: named parameter tensors in one TNSR container
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: list[Parameter]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            tensor_io.write_tensor(f, p.data)


def load_checkpoint(path) -> dict:
    out = {}
    with open(path, "rb") as f:
        count = struct.unpack("<I", f.read(4))[0]
        for _ in range(count):
            nlen = struct.unpack("<H", f.read(2))[0]
            name = f.read(nlen).decode()
            out[name] = tensor_io.read_tensor(f)
    return out


# ---------------------------------------------------------------------------
# ablation harness
# ---------------------------------------------------------------------------

def ablate(config: PipelineConfig, log=None, steps: int | None = None,
           scenes: int | None = None) -> list[dict]:
    """Train and evaluate every depth x fusion strategy cell on one seed."""
    cells = [(d, f) for d in ("ddvm", "ar", "onehot") for f in ("aaf", "ca3d", "none")]

    def run_cell(cell):
        d, f = cell
        cfg = PipelineConfig.from_text(config.to_text())
        cfg.depth_strategy = d
        cfg.fusion_strategy = f
        row = {"setting": f"{d} + {f}", "depth": d, "fusion": f}
        try:
            res = train_toy(cfg, steps=steps, scenes=scenes)
            row["IoU"] = res.holdout_iou
            row["mIoU"] = res.holdout_miou
        except Exception as exc:  # cell failure must not kill the table
            row["IoU"] = "FAILED"
            row["mIoU"] = "FAILED"
            row["error"] = str(exc)
        ref = []
        if f == "aaf" and d in REFERENCE_DEPTH:
            ref.append(f"depth-route ref {REFERENCE_DEPTH[d][0]:.2f}/{REFERENCE_DEPTH[d][1]:.2f}")
        if d == "ddvm" and f in REFERENCE_FUSION:
            ref.append(f"fusion ref {REFERENCE_FUSION[f][0]:.2f}/{REFERENCE_FUSION[f][1]:.2f}")
        row["reference"] = f"{'; '.join(ref)} [{REFERENCE_NOTE}]" if ref else ""
        return row

    workers = int(os.environ.get("SSC_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    if log:
        for row in rows:
            log(f"cell {row['setting']}: IoU={row['IoU']} mIoU={row['mIoU']} {row['reference']}")
    return rows
