"""
Feature network f = h o g, similarity network Phi, and the EMA shadow of Phi.

Parameters are plain dicts of float64 arrays keyed ``"<layer>.W"`` /
``"<layer>.b"``; forward passes bind them onto a ``Tape`` so the same code
serves training (trainable leaves) and evaluation (constants).
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from lib import autodiff as ad
from lib.autodiff import DimensionError, Matrix, Node, ParameterError, Tape

logger = logging.getLogger(__name__)

MODEL_FORMAT = "simgraph-model/1"
ACTIVATIONS = ("leaky_relu", "identity")
HEADS = ("softmax", "none")

Params = Dict[str, np.ndarray]


@dataclass
class MlpSpec:
    """widths[0] is the input width; layer k maps widths[k] -> widths[k+1].

    ``dropout[k]`` is applied to the output of layer k (after its activation).
    """

    widths: List[int]
    activations: List[str]
    dropout: List[float] = field(default_factory=list)
    head: str = "none"
    slope: float = 0.1

    def __post_init__(self):
        layers = len(self.widths) - 1
        if layers < 1:
            raise ParameterError("an MLP needs at least one layer")
        if not self.dropout:
            self.dropout = [0.0] * layers
        if len(self.activations) != layers or len(self.dropout) != layers:
            raise ParameterError(
                f"{layers} layers need {layers} activations and dropout rates, "
                f"got {len(self.activations)} and {len(self.dropout)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ParameterError(f"unknown activation '{act}'")
        for rate in self.dropout:
            if not 0.0 <= rate < 1.0:
                raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        if self.head not in HEADS:
            raise ParameterError(f"unknown head '{self.head}'")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]


def toy_feature_specs(in_dim: int = 2, hidden: int = 100, n_classes: int = 2) -> Tuple[MlpSpec, MlpSpec]:
    """g: in -> hidden (leaky ReLU 0.1); h: hidden -> classes (softmax)."""
    g = MlpSpec(widths=[in_dim, hidden], activations=["leaky_relu"])
    h = MlpSpec(widths=[hidden, n_classes], activations=["identity"], head="softmax")
    return g, h


def toy_similarity_spec(latent_dim: int = 100, dropout: float = 0.2) -> MlpSpec:
    """2*latent -> 512 -> dropout -> 128 -> dropout -> 64 -> 2 (softmax)."""
    return MlpSpec(
        widths=[2 * latent_dim, 512, 128, 64, 2],
        activations=["leaky_relu", "leaky_relu", "leaky_relu", "identity"],
        dropout=[dropout, dropout, 0.0, 0.0],
        head="softmax",
    )


def init_params(spec: MlpSpec, seed) -> Params:
    """He-scaled Gaussian weights (std sqrt(2/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        params[f"{k}.W"] = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        params[f"{k}.b"] = np.zeros((1, fan_out))
    return params


@dataclass
class ModelState:
    g_spec: MlpSpec
    h_spec: MlpSpec
    phi_spec: MlpSpec
    theta: Params
    alpha: Params
    alpha_ema: Params
    ema_decay: float = 0.99

    @property
    def latent_dim(self) -> int:
        return self.g_spec.out_dim

    @property
    def n_classes(self) -> int:
        return self.h_spec.out_dim


def init_model_state(
    g_spec: MlpSpec, h_spec: MlpSpec, phi_spec: MlpSpec, seed, ema_decay: float = 0.99
) -> ModelState:
    if h_spec.in_dim != g_spec.out_dim:
        raise DimensionError(f"h expects width {h_spec.in_dim}, g produces {g_spec.out_dim}")
    if phi_spec.in_dim != 2 * g_spec.out_dim:
        raise DimensionError(f"Phi expects width {phi_spec.in_dim}, pairs are {2 * g_spec.out_dim} wide")
    if phi_spec.out_dim != 2:
        raise DimensionError("Phi must emit two columns [similar, dissimilar]")
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    g_seed, h_seed, phi_seed = root.spawn(3)
    theta = {f"g.{k}": v for k, v in init_params(g_spec, g_seed).items()}
    theta.update({f"h.{k}": v for k, v in init_params(h_spec, h_seed).items()})
    alpha = init_params(phi_spec, phi_seed)
    # warm start: the shadow begins as an exact copy
    alpha_ema = {k: v.copy() for k, v in alpha.items()}
    return ModelState(g_spec, h_spec, phi_spec, theta, alpha, alpha_ema, ema_decay)


def mlp_forward(
    spec: MlpSpec,
    params: Dict[str, Node],
    x: Node,
    training: bool,
    rng: Optional[np.random.Generator],
    prefix: str = "",
    apply_head: bool = True,
) -> Node:
    out = x
    for k in range(spec.n_layers):
        out = ad.add_row(ad.matmul(out, params[f"{prefix}{k}.W"]), params[f"{prefix}{k}.b"])
        if spec.activations[k] == "leaky_relu":
            out = ad.leaky_relu(out, spec.slope)
        out = ad.dropout(out, spec.dropout[k], rng, training)
    if apply_head and spec.head == "softmax":
        out = ad.softmax_rows(out)
    return out


def feature_logits(
    state: ModelState,
    X,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
    trainable: bool = True,
) -> Tuple[Node, Node]:
    """(Z, h(Z)) with the softmax head left off."""
    if tape is None:
        tape, trainable = Tape(), False
    x = ad.lift(X, tape)
    if x.cols != state.g_spec.in_dim:
        raise DimensionError(f"feature_forward: input width {x.cols}, g expects {state.g_spec.in_dim}")
    theta = tape.bind("theta", state.theta, trainable=trainable)
    Z = mlp_forward(state.g_spec, theta, x, training, rng, prefix="g.")
    return Z, mlp_forward(state.h_spec, theta, Z, training, rng, prefix="h.", apply_head=False)


def feature_forward(
    state: ModelState,
    X,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
    trainable: bool = True,
) -> Tuple[Node, Node]:
    """Return (Z, F): latent features g(X) and class probabilities softmax(h(Z)).

    Without a tape the pass runs on a fresh tape with constant parameters.
    """
    Z, logits = feature_logits(state, X, training, rng, tape, trainable)
    return Z, ad.softmax_rows(logits) if state.h_spec.head == "softmax" else logits


def similarity_forward(
    state: ModelState,
    Zi,
    Zj,
    use_ema: bool = False,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    tape: Optional[Tape] = None,
    trainable: bool = True,
    logits: bool = False,
) -> Node:
    """Phi on ordered pairs (Zi[k], Zj[k]); rows are [W, 1 - W].

    With ``use_ema`` the shadow parameters are used and the output is detached.
    ``logits`` returns the live pre-softmax scores instead.
    """
    if tape is None:
        tape, trainable = Tape(), False
    zi, zj = ad.lift(Zi, tape), ad.lift(Zj, tape)
    if zi.shape != zj.shape:
        raise DimensionError(f"similarity_forward: pair halves {zi.shape} vs {zj.shape}")
    pair = ad.concat_cols(zi, zj)
    if pair.cols != state.phi_spec.in_dim:
        raise DimensionError(f"similarity_forward: pair width {pair.cols}, Phi expects {state.phi_spec.in_dim}")
    if use_ema:
        shadow = tape.bind("alpha_ema", state.alpha_ema, trainable=False)
        out = mlp_forward(state.phi_spec, shadow, pair, training, rng)
        return tape.constant(out.value)
    alpha = tape.bind("alpha", state.alpha, trainable=trainable)
    return mlp_forward(state.phi_spec, alpha, pair, training, rng, apply_head=not logits)


def predict_proba(state: ModelState, X) -> Matrix:
    """Eval-mode class probabilities."""
    _, F = feature_forward(state, X, training=False)
    return F.value


def latent(state: ModelState, X) -> Matrix:
    Z, _ = feature_forward(state, X, training=False)
    return Z.value


def pair_similarity(state: ModelState, Zi: Matrix, Zj: Matrix, chunk: int = 4096) -> np.ndarray:
    """Eval-mode W = Phi(Zi[k], Zj[k])[0] as a flat vector, evaluated in row chunks."""
    out = np.empty(Zi.shape[0])
    for start in range(0, Zi.shape[0], chunk):
        stop = start + chunk
        out[start:stop] = similarity_forward(state, Zi[start:stop], Zj[start:stop]).value[:, 0]
    return out


def ema_update(state: ModelState, decay: float) -> None:
    """alpha' <- decay * alpha' + (1 - decay) * alpha, in place."""
    if not 0.0 <= decay < 1.0:
        raise ParameterError(f"ema decay must be in [0, 1), got {decay}")
    for key, live in state.alpha.items():
        shadow = state.alpha_ema[key]
        shadow *= decay
        shadow += (1.0 - decay) * live


# --- persistence ---


def _spec_dict(spec: MlpSpec) -> dict:
    return asdict(spec)


def save_state(state: ModelState, path: Path) -> None:
    """Write an npz container: a format header, specs as JSON, every parameter matrix."""
    header = {
        "format": MODEL_FORMAT,
        "ema_decay": state.ema_decay,
        "g_spec": _spec_dict(state.g_spec),
        "h_spec": _spec_dict(state.h_spec),
        "phi_spec": _spec_dict(state.phi_spec),
    }
    arrays = {"__header__": np.array(json.dumps(header, sort_keys=True))}
    for group, params in (("theta", state.theta), ("alpha", state.alpha), ("alpha_ema", state.alpha_ema)):
        for key, arr in params.items():
            arrays[f"{group}/{key}"] = arr
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    path.write_bytes(buffer.getvalue())


def load_state(path: Path) -> ModelState:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        if header.get("format") != MODEL_FORMAT:
            raise ParameterError(f"{path}: unsupported model format {header.get('format')!r}")
        groups: Dict[str, Params] = {"theta": {}, "alpha": {}, "alpha_ema": {}}
        for name in data.files:
            if name == "__header__":
                continue
            group, key = name.split("/", 1)
            groups[group][key] = data[name].copy()
    return ModelState(
        g_spec=MlpSpec(**header["g_spec"]),
        h_spec=MlpSpec(**header["h_spec"]),
        phi_spec=MlpSpec(**header["phi_spec"]),
        theta=groups["theta"],
        alpha=groups["alpha"],
        alpha_ema=groups["alpha_ema"],
        ema_decay=float(header["ema_decay"]),
    )
