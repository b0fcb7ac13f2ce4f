"""Encoder, pretext classifier, global/local memories, fusion gate and per-variant decoders."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import KERNEL, Geometry, RunConfig
from .fusion import FusionGate
from .memory import DegenerateQueryError, MemoryMatrix, sparsity_loss
from .nn import (Adam, Concat, Conv2D, ConvTranspose2D, Dense, Dropout, Flatten, MaxPool2x2,
                 NumericalError, Parameter, ReLU, Sequential, softmax_cross_entropy)
from .signal import TransformParams, Window, expand_windows

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    recon: float
    ce: float
    sparse: float
    total: float


def total_loss(recon: float, ce: float, sparse: float, lambda1: float, lambda2: float) -> LossBreakdown:
    return LossBreakdown(recon, ce, sparse, recon + lambda1 * ce + lambda2 * sparse)


@dataclass
class ForwardResult:
    recon: np.ndarray  # (B, R, V, N)
    codes: np.ndarray  # (R, B, h, w, F)
    logits: np.ndarray | None  # (R*B, R)
    weights: list[np.ndarray]  # 2R arrays of (B*h*w, C); globals first
    alpha: np.ndarray | None
    cache: dict = field(default_factory=dict, repr=False)


class AmslModel:
    def __init__(self, cfg: RunConfig, channels: int | None = None, dtype=np.float32):
        self.cfg = cfg
        self.geometry: Geometry = cfg.validate(channels)
        self.channels = self.geometry.window[1]
        self.dtype = dtype
        self.n_variants = cfg.n_variants
        self.threshold = None
        self.norm_lo = np.zeros(self.channels, dtype=np.float32)
        self.norm_hi = np.ones(self.channels, dtype=np.float32)
        self.alpha_trace = np.zeros((0, 2 * self.n_variants), dtype=np.float32)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0])))
        self._build(rng)

    # -- construction ---------------------------------------------------------

    def _build(self, rng):
        cfg, g, dt = self.cfg, self.geometry, self.dtype
        feat, k = cfg.feature_size, (KERNEL, KERNEL)
        self.encoder = Sequential([
            Conv2D(1, cfg.encoder_channels, k, padding=g.conv_pad, rng=rng, dtype=dt, name="encoder.conv1",
                   needs_input_grad=False),
            ReLU("encoder.relu1"),
            MaxPool2x2("encoder.pool1"),
            Conv2D(cfg.encoder_channels, feat, k, padding=g.conv_pad, rng=rng, dtype=dt, name="encoder.conv2"),
            MaxPool2x2("encoder.pool2"),
        ], name="encoder")
        self.classifier = None
        if cfg.use_ssl:
            h, w = g.code
            if cfg.conv_padding == "valid":
                h, w = h - KERNEL + 1, w - KERNEL + 1
            self.classifier = Sequential([
                Conv2D(feat, 1, k, padding=g.conv_pad, rng=rng, dtype=dt, name="classifier.conv"),
                Flatten("classifier.flatten"),
                Dense(h * w, cfg.classifier_units, rng=rng, dtype=dt, name="classifier.fc1"),
                ReLU("classifier.relu"),
                Dropout(cfg.dropout, "classifier.dropout"),
                Dense(cfg.classifier_units, self.n_variants, rng=rng, dtype=dt, name="classifier.fc2"),
            ], name="classifier")
        self.global_memory = self.local_memories = self.gate = None
        if cfg.use_memory:
            self.global_memory = MemoryMatrix(cfg.memory_size, feat, rng, dt, "memory.global")
            self.local_memories = [MemoryMatrix(cfg.memory_size, feat, rng, dt, f"memory.local.{i}")
                                   for i in range(self.n_variants)]
            if cfg.adaptive_fusion:
                self.gate = FusionGate(self.n_variants, rng, dt)
        dec_in = 2 * feat if cfg.use_memory else feat
        n_dec = 1 if cfg.share_decoders else self.n_variants
        self.decoders = [self._decoder(dec_in, rng, f"decoder.{i}") for i in range(n_dec)]
        self.concat = Concat("decoder.concat")

    def _decoder(self, in_ch, rng, name):
        layers, chans = [], (in_ch, *self.cfg.decoder_widths)
        for j, dg in enumerate(self.geometry.decoder):
            layers.append(ConvTranspose2D(chans[j], chans[j + 1], (KERNEL, KERNEL), dg.stride, dg.crop,
                                          rng=rng, dtype=self.dtype, name=f"{name}.deconv{j + 1}"))
            if j < 3:
                layers.append(ReLU(f"{name}.relu{j + 1}"))
        return Sequential(layers, name=name)

    def decoder_for(self, i: int) -> Sequential:
        return self.decoders[0 if self.cfg.share_decoders else i]

    # -- state ----------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = list(self.encoder.parameters())
        if self.classifier is not None:
            params += self.classifier.parameters()
        if self.global_memory is not None:
            params += self.global_memory.parameters()
            for m in self.local_memories:
                params += m.parameters()
        if self.gate is not None:
            params += self.gate.parameters()
        for d in self.decoders:
            params += d.parameters()
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        out = {"norm.lo": self.norm_lo, "norm.hi": self.norm_hi}
        if self.gate is not None:
            out.update(self.gate.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        bufs = self.buffers()
        expected = set(params) | set(bufs)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            target = params[name].value if name in params else bufs[name]
            if target.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {target.shape}")
            target[...] = value

    def set_normalization(self, lo, hi) -> None:
        self.norm_lo[...] = lo
        self.norm_hi[...] = hi

    def fusion_weights(self, train=False) -> np.ndarray | None:
        if self.gate is None:
            return None
        return self.gate.fusion_weights(train)

    # -- forward / backward -----------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> ForwardResult:
        """Run a (B, R, V, N) batch of expanded windows."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != self.n_variants or x.shape[2:] != self.geometry.window:
            raise ValueError(f"expected (B, {self.n_variants}, {self.geometry.window[0]}, "
                             f"{self.geometry.window[1]}) input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        b, r = x.shape[:2]
        v, n = self.geometry.window
        xin = x.transpose(1, 0, 2, 3).reshape(r * b, v, n, 1)
        z, enc_cache = self.encoder.forward(xin, train, rng)
        h, w, feat = z.shape[1:]
        codes = z.reshape(r, b, h, w, feat)
        cache = {"enc": enc_cache, "shape": (b, r, h, w, feat)}

        logits = None
        if self.classifier is not None:
            logits, cache["cls"] = self.classifier.forward(z, train, rng)

        weights, alpha = [], None
        dec_inputs = []
        if cfg.use_memory:
            try:
                g_res = self.global_memory.address(z.reshape(-1, feat))
            except DegenerateQueryError as exc:
                raise DegenerateQueryError(f"global memory: {exc}") from exc
            per = b * h * w
            g_reads = g_res.read.reshape(r, b, h, w, feat)
            weights.extend(g_res.weights.reshape(r, per, -1))
            l_results = []
            for i, mem in enumerate(self.local_memories):
                try:
                    res = mem.address(codes[i].reshape(-1, feat))
                except DegenerateQueryError as exc:
                    raise DegenerateQueryError(f"variant {i}: {exc}") from exc
                l_results.append(res)
            weights.extend(res.weights for res in l_results)
            if self.gate is not None:
                alpha, cache["gate"] = self.gate.forward(train)
                a_g, a_l = alpha[:r], alpha[r:]
            else:
                a_g = a_l = np.ones(r, dtype=self.dtype)
            fused = []
            for i in range(r):
                zl = l_results[i].read.reshape(b, h, w, feat)
                fused.append(a_g[i] * g_reads[i] + a_l[i] * zl)
            cache.update(g_res=g_res, l_res=l_results, g_reads=g_reads, a_g=a_g, a_l=a_l)
            concat_caches = []
            for i in range(r):
                inp, cc = self.concat.forward([fused[i], codes[i]])
                dec_inputs.append(inp)
                concat_caches.append(cc)
            cache["concat"] = concat_caches
        else:
            dec_inputs = [codes[i] for i in range(r)]

        outs, dec_caches = [], []
        for i in range(r):
            o, dc = self.decoder_for(i).forward(dec_inputs[i], train, rng)
            outs.append(o.reshape(b, v, n))
            dec_caches.append(dc)
        cache["dec"] = dec_caches
        recon = np.stack(outs, axis=1)
        return ForwardResult(recon, codes, logits, weights, alpha, cache)

    def losses(self, x: np.ndarray, out: ForwardResult) -> LossBreakdown:
        b, r = x.shape[:2]
        diff = out.recon.astype(np.float64) - x
        recon = float((diff * diff).sum()) / b
        ce = 0.0
        if out.logits is not None:
            ce, _ = softmax_cross_entropy(out.logits.astype(np.float64), self._labels(b, r))
        sparse = sum(sparsity_loss(wt) for wt in out.weights) / b
        return total_loss(recon, ce, sparse, self.cfg.lambda1, self.cfg.lambda2)

    @staticmethod
    def _labels(b, r):
        return np.repeat(np.arange(r), b)

    def backward(self, x: np.ndarray, out: ForwardResult) -> None:
        """Accumulate gradients of the mean-over-batch objective into every parameter."""
        cfg, c = self.cfg, out.cache
        b, r, h, w, feat = c["shape"]
        v, n = self.geometry.window
        dt = self.dtype
        drecon = (2.0 / b) * (out.recon - x.astype(dt))
        dcodes = np.zeros((r, b, h, w, feat), dtype=dt)

        if cfg.use_memory:
            dg_reads = np.empty((r, b, h, w, feat), dtype=dt)
            dl_reads = []
            da_g, da_l = np.zeros(r), np.zeros(r)
            for i in range(r):
                ddec = self.decoder_for(i).backward(c["dec"][i], drecon[:, i].reshape(b, v, n, 1))
                dfused, dcode = self.concat.backward(c["concat"][i], ddec)
                dcodes[i] += dcode
                zl = c["l_res"][i].read.reshape(b, h, w, feat)
                da_g[i] = float((dfused * c["g_reads"][i]).sum(dtype=np.float64))
                da_l[i] = float((dfused * zl).sum(dtype=np.float64))
                dg_reads[i] = c["a_g"][i] * dfused
                dl_reads.append(c["a_l"][i] * dfused)
            scale = cfg.lambda2 / b
            dz = self.global_memory.backward(c["g_res"], dg_reads.reshape(-1, feat), scale)
            dcodes += dz.reshape(r, b, h, w, feat)
            for i, mem in enumerate(self.local_memories):
                dz = mem.backward(c["l_res"][i], dl_reads[i].reshape(-1, feat), scale)
                dcodes[i] += dz.reshape(b, h, w, feat)
            if self.gate is not None:
                self.gate.backward(c["gate"], np.concatenate([da_g, da_l]).astype(dt))
        else:
            for i in range(r):
                dcodes[i] += self.decoder_for(i).backward(c["dec"][i], drecon[:, i].reshape(b, v, n, 1))

        dz = dcodes.reshape(r * b, h, w, feat)
        if self.classifier is not None:
            _, dlogits = softmax_cross_entropy(out.logits, self._labels(b, r))
            dz = dz + self.classifier.backward(c["cls"], (cfg.lambda1 * dlogits).astype(dt))
        self.encoder.backward(c["enc"], dz)

    # -- scoring ----------------------------------------------------------------

    def window_errors(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode Err per window: summed squared error over all R variants."""
        errs = []
        for s in range(0, len(x), batch_size):
            xb = x[s:s + batch_size]
            out = self.forward(xb, train=False)
            d = out.recon.astype(np.float64) - xb
            errs.append((d * d).sum(axis=(1, 2, 3)))
        return np.concatenate(errs) if errs else np.zeros(0)

    def transform_params(self) -> TransformParams:
        return TransformParams.from_config(self.cfg)

    def expand(self, windows: Sequence[Window]) -> np.ndarray:
        for wnd in windows:
            if wnd.values.shape != self.geometry.window:
                raise ValueError(f"window shape {wnd.values.shape} != model window {self.geometry.window}")
        return expand_windows(windows, self.transform_params(), self.cfg.seed, self.dtype)

    def clone(self) -> "AmslModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    ce: float
    sparse: float
    total: float
    val_total: float

    @property
    def fields(self):
        return ("epoch", "recon", "ce", "sparse", "total", "val_total")


def evaluate_loss(model: AmslModel, x: np.ndarray, batch_size: int = 256) -> LossBreakdown:
    parts = np.zeros(3)
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        lb = model.losses(xb, model.forward(xb, train=False))
        parts += len(xb) * np.array([lb.recon, lb.ce, lb.sparse])
    parts /= max(len(x), 1)
    return total_loss(*parts, model.cfg.lambda1, model.cfg.lambda2)


def fit(train: Sequence[Window] | np.ndarray, val: Sequence[Window] | np.ndarray,
        cfg: RunConfig, model: AmslModel | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None) -> tuple[AmslModel, list[EpochRecord]]:
    """Mini-batch Adam on recon + lambda1*CE + lambda2*entropy; keeps the best-validation state.

    ``train``/``val`` are windows or already expanded (B, R, V, N) arrays.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if model is None:
        n_ch = train.shape[3] if isinstance(train, np.ndarray) else train[0].values.shape[1]
        model = AmslModel(cfg, n_ch)
    xt = train if isinstance(train, np.ndarray) else model.expand(train)
    xv = val if isinstance(val, np.ndarray) else model.expand(val) if len(val) else None
    xt = xt.astype(model.dtype, copy=False)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history: list[EpochRecord] = []
    alphas = []
    best_score, best_state = math.inf, None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xt))
        sums, seen = np.zeros(4), 0
        for bi, s in enumerate(range(0, len(xt), cfg.batch_size)):
            xb = xt[order[s:s + cfg.batch_size]]
            out = model.forward(xb, train=True, rng=rng)
            lb = model.losses(xb, out)
            if not math.isfinite(lb.total):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            model.backward(xb, out)
            try:
                opt.step()
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch + 1}, batch {bi + 1}: {exc}") from exc
            if model.global_memory is not None:
                for mem in [model.global_memory, *model.local_memories]:
                    mem.revive_dead_rows(rng)
            sums += len(xb) * np.array([lb.recon, lb.ce, lb.sparse, lb.total])
            seen += len(xb)
        sums /= seen
        if xv is not None and len(xv):
            vl = evaluate_loss(model, xv)
            val_total, score = vl.total, vl.recon + cfg.lambda1 * vl.ce
        else:
            val_total, score = float("nan"), sums[0] + cfg.lambda1 * sums[1]
        rec = EpochRecord(epoch + 1, *map(float, sums), float(val_total))
        history.append(rec)
        a = model.fusion_weights(train=False)
        alphas.append(a if a is not None else np.zeros(2 * model.n_variants, dtype=np.float32))
        if score < best_score:
            best_score, best_state = score, model.state_dict()
        log.info("epoch %d: total %.4f (recon %.4f ce %.4f sparse %.4f) val %.4f",
                 rec.epoch, rec.total, rec.recon, rec.ce, rec.sparse, rec.val_total)
        if on_epoch is not None:
            on_epoch(rec)

    if best_state is not None:
        model.load_state_dict(best_state)
    if alphas:
        model.alpha_trace = np.asarray(alphas, dtype=np.float32)
    return model, history
