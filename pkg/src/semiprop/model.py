"""The differentiable proposal network.

Three heads share a two-layer temporal-conv base:
  * boundary head: per-snippet start/end probabilities,
  * confidence head: dense D x T candidate maps produced through a
    precomputed sparse boundary-matching sampler (one sparse matmul),
  * auxiliary heads: feature reconstruction and clip-order logits.

Forward passes build an autodiff graph; `backward` extracts parameter
gradients from it. A 64-bit path is used for gradient checking, 32-bit for
training speed (same code, parameterized by dtype).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .perturb import Predictions

CHECKPOINT_MAGIC = b"SPCHKPT1"


@dataclass(frozen=True)
class HyperShape:
    T: int = 100
    C: int = 16
    H: int = 32
    Hp: int = 16
    D: int = 100
    N: int = 8
    K: int = 2

    def validate(self) -> None:
        if self.D > self.T:
            raise ValueError(f"D={self.D} must not exceed T={self.T}")
        if self.N < 2:
            raise ValueError("need N >= 2 sample points")
        if min(self.T, self.C, self.H, self.Hp, self.D) < 1 or self.K < 2:
            raise ValueError(f"bad hyper shape: {self}")

    @property
    def n_orders(self) -> int:
        return math.factorial(self.K)


class ParamStore(dict):
    """Named parameter tensors; insertion order is declaration order."""

    def copy_store(self) -> "ParamStore":
        out = ParamStore()
        out.update({k: v.copy() for k, v in self.items()})
        return out

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        out.update({k: v.astype(dtype) for k, v in self.items()})
        return out


@dataclass
class BMSamplingMask:
    """Sparse interpolation weights for boundary-matching feature sampling.

    Conceptually a (T, N*D*T) matrix; only the columns of valid candidates
    are stored. Column n*n_valid + j holds the two linear-interpolation
    weights of sample point n of candidate j, and sums to 1.
    """

    W: sparse.csr_matrix  # (T, N * n_valid)
    d_idx: np.ndarray  # (n_valid,)
    i_idx: np.ndarray  # (n_valid,)
    T: int
    D: int
    N: int

    @property
    def n_valid(self) -> int:
        return self.d_idx.shape[0]

    def column_weights(self, n: int, d: int, i: int) -> np.ndarray:
        """Dense weight column for sample n of candidate (d, i); zeros for
        invalid candidates (the conceptual T x N*D*T layout)."""
        col = np.zeros(self.T)
        j = np.flatnonzero((self.d_idx == d) & (self.i_idx == i))
        if j.size:
            col[:] = self.W[:, n * self.n_valid + int(j[0])].toarray().ravel()
        return col


def build_bm_mask(T: int, D: int, N: int) -> BMSamplingMask:
    """Precompute the sampling matrix: candidate (d, i) covers [i, i+d+1],
    expanded by 0.25*(d+1) on each side, with N uniform sample locations
    interpolated linearly between neighboring snippets."""
    if D > T or N < 2:
        raise ValueError(f"need D <= T and N >= 2, got T={T}, D={D}, N={N}")
    d_list, i_list = [], []
    for d in range(D):
        for i in range(T - d):
            d_list.append(d)
            i_list.append(i)
    d_idx = np.asarray(d_list)
    i_idx = np.asarray(i_list)
    n_valid = d_idx.shape[0]

    dur = (d_idx + 1).astype(np.float64)
    lo = i_idx - 0.25 * dur
    hi = i_idx + 1.25 * dur
    steps = np.arange(N) / (N - 1)
    locs = lo[None, :] + (hi - lo)[None, :] * steps[:, None]  # (N, n_valid)
    locs = np.clip(locs, 0.0, T - 1.0)

    base = np.floor(locs).astype(np.int64)
    frac = locs - base
    cols = np.arange(N)[:, None] * n_valid + np.arange(n_valid)[None, :]

    up = frac > 0
    rows = np.concatenate([base.ravel(), (base[up] + 1).ravel()])
    ccols = np.concatenate([cols.ravel(), cols[up].ravel()])
    vals = np.concatenate([(1.0 - frac).ravel(), frac[up].ravel()])
    W = sparse.coo_matrix((vals, (rows, ccols)), shape=(T, N * n_valid)).tocsr()
    return BMSamplingMask(W=W, d_idx=d_idx, i_idx=i_idx, T=T, D=D, N=N)


def param_shapes(hyper: HyperShape) -> dict[str, tuple[int, ...]]:
    h = hyper
    return {
        "base.conv1.w": (3, h.C, h.H), "base.conv1.b": (h.H,),
        "base.conv2.w": (3, h.H, h.H), "base.conv2.b": (h.H,),
        "tem.conv1.w": (3, h.H, h.H), "tem.conv1.b": (h.H,),
        "tem.conv2.w": (1, h.H, 2), "tem.conv2.b": (2,),
        "pem.conv1.w": (3, h.H, h.Hp), "pem.conv1.b": (h.Hp,),
        "pem.reduce.w": (h.N,), "pem.reduce.b": (h.Hp,),
        "pem.conv2a.w": (3, 3, h.Hp, h.Hp), "pem.conv2a.b": (h.Hp,),
        "pem.conv2b.w": (3, 3, h.Hp, 2), "pem.conv2b.b": (2,),
        "recon.conv.w": (3, h.H, h.C), "recon.conv.b": (h.C,),
        "order.conv.w": (3, h.H, h.H), "order.conv.b": (h.H,),
        "order.fc.w": (h.H, h.n_orders), "order.fc.b": (h.n_orders,),
    }


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 3:  # conv1d (k, Cin, Cout)
        return shape[0] * shape[1]
    if len(shape) == 4:  # conv2d (k, k, Cin, Cout)
        return shape[0] * shape[1] * shape[2]
    return shape[0]  # linear (in, out) or the N-reduction weight


def init_params(hyper: HyperShape, seed: int, dtype=np.float64) -> ParamStore:
    """Uniform(-s, s) kernels with s = sqrt(1/fan_in); zero biases."""
    hyper.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for name, shape in param_shapes(hyper).items():
        if name.endswith(".b"):
            store[name] = np.zeros(shape, dtype=dtype)
        else:
            s = math.sqrt(1.0 / _fan_in(name, shape))
            store[name] = rng.uniform(-s, s, size=shape).astype(dtype)
    return store


def wrap_params(params: ParamStore, requires_grad: bool = True) -> dict[str, ad.Tensor]:
    return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


class GateTape:
    """Records ReLU activation masks on a reference forward pass so a replay
    evaluates the same smooth branch of the piecewise-linear network.

    Finite differences across a ReLU kink measure the average of two slopes,
    not a derivative; the gradient check replays the recorded gates (like the
    frozen dropout noise) so both FD evaluations sample the branch whose
    derivative the analytic backward pass reports.
    """

    def __init__(self):
        self.masks: list[np.ndarray] = []
        self.recording = True
        self._i = 0

    def rewind(self):
        self.recording = False
        self._i = 0

    def gate(self, x: ad.Tensor) -> ad.Tensor:
        if self.recording:
            mask = (x.data > 0.0).astype(x.data.dtype)
            self.masks.append(mask)
        else:
            mask = self.masks[self._i]
            self._i += 1
        return ad.mul(x, mask)


@dataclass
class ModelOutputs:
    p_s: ad.Tensor
    p_e: ad.Tensor
    m_cc: ad.Tensor
    m_cr: ad.Tensor
    base_feat: ad.Tensor
    valid_mask: np.ndarray
    recon: ad.Tensor | None = None
    order_logits: ad.Tensor | None = None
    dropout_mask: np.ndarray | None = None

    def detach(self) -> Predictions:
        return Predictions(
            p_s=self.p_s.data.copy(), p_e=self.p_e.data.copy(),
            m_cc=self.m_cc.data.copy(), m_cr=self.m_cr.data.copy(),
            valid_mask=self.valid_mask.copy(),
        )


class ProposalNetwork:
    """Owns the hyper shape and the cached sampling mask; stateless otherwise."""

    def __init__(self, hyper: HyperShape):
        hyper.validate()
        self.hyper = hyper
        self.bm = build_bm_mask(hyper.T, hyper.D, hyper.N)
        vm = np.zeros((hyper.D, hyper.T))
        vm[self.bm.d_idx, self.bm.i_idx] = 1.0
        self.valid_mask = vm
        self._W_cache: dict[str, sparse.csr_matrix] = {}

    def init_params(self, seed: int, dtype=np.float64) -> ParamStore:
        return init_params(self.hyper, seed, dtype=dtype)

    def _W(self, dtype) -> sparse.csr_matrix:
        key = np.dtype(dtype).name
        if key not in self._W_cache:
            self._W_cache[key] = self.bm.W.astype(dtype)
        return self._W_cache[key]

    def make_dropout_mask(self, p_drop: float, rng: np.random.Generator, dtype):
        h = self.hyper
        if p_drop <= 0.0:
            return np.ones((h.T, h.H), dtype=dtype)
        keep = rng.random((h.T, h.H)) >= p_drop
        return (keep / (1.0 - p_drop)).astype(dtype)

    def forward(
        self,
        params: ParamStore | dict[str, ad.Tensor],
        f: np.ndarray,
        heads=frozenset({"proposal"}),
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        p_drop: float = 0.0,
        dropout_mask: np.ndarray | None = None,
        requires_grad: bool = True,
        gate_tape: GateTape | None = None,
    ) -> ModelOutputs:
        """Evaluate the network on one (T, C) sequence.

        `params` may be a ParamStore of arrays (wrapped internally) or a dict
        of already-wrapped tensors shared across passes so their gradients
        accumulate. Dropout runs on the base output in train_mode only; the
        drawn mask is recorded on the output so a pass can be replayed.
        """
        h = self.hyper
        first = next(iter(params.values()))
        wrapped = params if isinstance(first, ad.Tensor) else wrap_params(params, requires_grad)
        dtype = next(iter(wrapped.values())).data.dtype
        if f.shape != (h.T, h.C):
            raise ValueError(f"input shape {f.shape} != {(h.T, h.C)}")

        P = wrapped.__getitem__
        act = gate_tape.gate if gate_tape is not None else ad.relu
        x = ad.Tensor(np.ascontiguousarray(f, dtype=dtype))
        z = act(ad.conv1d(x, P("base.conv1.w"), P("base.conv1.b"), pad=1))
        z = act(ad.conv1d(z, P("base.conv2.w"), P("base.conv2.b"), pad=1))
        dmask = None
        if train_mode and p_drop > 0.0:
            if dropout_mask is None:
                if rng is None:
                    raise ValueError("train_mode dropout needs an rng or a frozen mask")
                dropout_mask = self.make_dropout_mask(p_drop, rng, dtype)
            dmask = dropout_mask
            z = ad.dropout(z, dmask)
        base_feat = z

        out = ModelOutputs(
            p_s=None, p_e=None, m_cc=None, m_cr=None,  # type: ignore[arg-type]
            base_feat=base_feat, valid_mask=self.valid_mask, dropout_mask=dmask,
        )

        if "proposal" in heads:
            t = act(ad.conv1d(base_feat, P("tem.conv1.w"), P("tem.conv1.b"), pad=1))
            t = ad.sigmoid(ad.conv1d(t, P("tem.conv2.w"), P("tem.conv2.b"), pad=0))
            out.p_s = ad.take_column(t, 0)
            out.p_e = ad.take_column(t, 1)

            q = act(ad.conv1d(base_feat, P("pem.conv1.w"), P("pem.conv1.b"), pad=1))
            samp = ad.sparse_sample(q, self._W(dtype))
            samp = ad.reshape(samp, (h.Hp, h.N, self.bm.n_valid))
            red = act(ad.reduce_axis1(samp, P("pem.reduce.w"), P("pem.reduce.b")))
            grid = ad.scatter_grid(red, self.bm.d_idx, self.bm.i_idx, (h.D, h.T))
            g = ad.transpose(grid, (1, 2, 0))
            g = act(ad.conv2d(g, P("pem.conv2a.w"), P("pem.conv2a.b"), pad=1))
            g = ad.sigmoid(ad.conv2d(g, P("pem.conv2b.w"), P("pem.conv2b.b"), pad=1))
            g = ad.mul(g, self.valid_mask.astype(dtype)[:, :, None])
            out.m_cc = take_last(g, 0)
            out.m_cr = take_last(g, 1)
            _check_finite(out.m_cc.data, "pem")
        else:
            zero = ad.Tensor(np.zeros((h.T,), dtype=dtype))
            zmap = ad.Tensor(np.zeros((h.D, h.T), dtype=dtype))
            out.p_s, out.p_e, out.m_cc, out.m_cr = zero, zero, zmap, zmap

        if "recon" in heads:
            out.recon = ad.conv1d(base_feat, P("recon.conv.w"), P("recon.conv.b"), pad=1)
            _check_finite(out.recon.data, "recon")
        if "order" in heads:
            o = act(ad.conv1d(base_feat, P("order.conv.w"), P("order.conv.b"), pad=1))
            pooled = ad.tmean(o, axis=0)
            out.order_logits = ad.add(ad.dot_vm(pooled, P("order.fc.w")), P("order.fc.b"))
            _check_finite(out.order_logits.data, "order")
        return out

    def pad_to_length(self, f: np.ndarray) -> np.ndarray:
        """Zero-pad truncated sequences (order-task clips) back to T rows."""
        h = self.hyper
        if f.shape[0] == h.T:
            return f
        fpad = np.zeros((h.T, h.C), dtype=f.dtype)
        fpad[: f.shape[0]] = f
        return fpad


def take_last(a: ad.Tensor, idx: int) -> ad.Tensor:
    """Select index `idx` of the trailing axis."""
    out = ad.Tensor(np.ascontiguousarray(a.data[..., idx]), _parents=(a,))

    def bwd():
        g = np.zeros_like(a.data)
        g[..., idx] = out.grad
        ad._accum(a, g)

    out._backward = bwd if out.requires_grad else None
    return out


def _check_finite(arr: np.ndarray, layer: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite activation in layer '{layer}'")


def backward(loss: ad.Tensor, param_tensors: dict[str, ad.Tensor]) -> ParamStore:
    """Run reverse mode from a scalar loss and collect per-parameter grads."""
    loss.backward()
    grads = ParamStore()
    for name, t in param_tensors.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


# ---------------------------------------------------------------------------
# gradient checking

def composite_loss(net: ProposalNetwork, wrapped: dict[str, ad.Tensor],
                   f: np.ndarray, targets: dict,
                   dropout_mask: np.ndarray | None,
                   gate_tape: GateTape | None = None) -> ad.Tensor:
    """A scalar loss touching every head, for finite-difference checks."""
    from . import pretext

    out = net.forward(wrapped, f, heads={"proposal", "recon", "order"},
                      train_mode=dropout_mask is not None,
                      dropout_mask=dropout_mask,
                      p_drop=0.1 if dropout_mask is not None else 0.0,
                      gate_tape=gate_tape)
    vm = net.valid_mask
    nvalid = vm.sum()
    loss = ad.tmean(ad.square(out.p_s - targets["p_s"]))
    loss = loss + ad.tmean(ad.square(out.p_e - targets["p_e"]))
    loss = loss + ad.tsum(ad.mul(ad.square(out.m_cc - targets["m_cc"]), vm)) / nvalid
    loss = loss + ad.tsum(ad.mul(ad.square(out.m_cr - targets["m_cr"]), vm)) / nvalid
    loss = loss + pretext.recon_loss(out.recon, targets["recon"])
    loss = loss + pretext.order_loss(out.order_logits, targets["order_label"])
    return loss


def grad_check(hyper: HyperShape, seed: int, h_step: float = 1e-3,
               freeze_dropout: bool = True, p_drop: float = 0.1,
               tolerance: float = 1e-4) -> dict:
    """Compare analytic gradients with central finite differences for every
    parameter tensor, on a composite loss exercising all heads (64-bit).

    Per-tensor relative error is max|analytic - fd| normalized by the largest
    gradient magnitude in that tensor (floored at 1e-8). With
    freeze_dropout=False a fresh dropout mask is drawn per evaluation, which
    is expected to fail; it documents why the tape freezes the noise.
    """
    net = ProposalNetwork(hyper)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = net.init_params(seed, dtype=np.float64)
    # jitter to a generic point: zero-initialized biases put ReLU
    # pre-activations exactly on the kink, where finite differences are
    # meaningless regardless of step size
    for v in params.values():
        v += rng.uniform(-0.1, 0.1, size=v.shape)
    f = rng.normal(size=(hyper.T, hyper.C))
    targets = {
        "p_s": rng.random(hyper.T), "p_e": rng.random(hyper.T),
        "m_cc": rng.random((hyper.D, hyper.T)) * net.valid_mask,
        "m_cr": rng.random((hyper.D, hyper.T)) * net.valid_mask,
        "recon": rng.normal(size=(hyper.T, hyper.C)),
        "order_label": int(rng.integers(hyper.n_orders)),
    }
    frozen_mask = net.make_dropout_mask(p_drop, rng, np.float64)

    tape = GateTape()
    wrapped = wrap_params(params)
    grads = backward(composite_loss(net, wrapped, f, targets, frozen_mask,
                                    gate_tape=tape), wrapped)

    def value_at():
        mask = frozen_mask if freeze_dropout else net.make_dropout_mask(p_drop, rng, np.float64)
        w = wrap_params(params, requires_grad=False)
        tape.rewind()
        return composite_loss(net, w, f, targets, mask, gate_tape=tape).item()

    report = {"tensors": {}, "passed": True, "tolerance": tolerance}
    for name in params:
        g = grads[name]
        fd = np.zeros_like(g)
        flat = params[name].ravel()
        fd_flat = fd.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h_step
            up = value_at()
            flat[j] = orig - h_step
            dn = value_at()
            flat[j] = orig
            fd_flat[j] = (up - dn) / (2.0 * h_step)
        scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-8)
        rel = float(np.abs(g - fd).max() / scale)
        report["tensors"][name] = rel
        if rel > tolerance:
            report["passed"] = False
    report["max_rel_error"] = max(report["tensors"].values())
    return report


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(path, hyper: HyperShape, seed: int, step: int,
                    precision: str, tensors: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    directory = [{"name": k, "shape": list(v.shape), "dtype": str(v.dtype)}
                 for k, v in tensors.items()]
    header = {
        "hyper": hyper.__dict__, "seed": seed, "step": step,
        "precision": precision, "tensors": directory, "extra": extra or {},
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dt.itemsize)
            arr = np.frombuffer(buf, dtype=dt).reshape(shape).astype(entry["dtype"])
            tensors[entry["name"]] = arr
    hyper = HyperShape(**header["hyper"])
    expected = param_shapes(hyper)
    for name, shape in expected.items():
        key = f"student.{name}"
        if key in tensors and tensors[key].shape != shape:
            raise ValueError(f"{path}: tensor {key} has shape "
                             f"{tensors[key].shape}, expected {shape}")
        if name in tensors and tensors[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape "
                             f"{tensors[name].shape}, expected {shape}")
    return header, tensors
