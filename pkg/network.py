"""
Classifier networks built on TapeGraph.

SGNetwork is a small pre-activation residual backbone plus a self-gradient
block: a stack of bias-free 1x1 convolutions, each followed by tanh, scaled
by eps_block. The two-pass forward runs the backbone once without injection,
takes the (detached) input gradient of the soft loss, maps it through the
block and classifies the clamped sum x + block(g).

OracleGradientNetwork is the diagnostic variant that sees the cross-entropy
input gradient, computed with the true labels, as extra input channels.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np
import structlog

from errors import ContractError
from tape import NodeId, TapeGraph, Tensor, standardize_per_sample

log = structlog.get_logger()

BN_MOMENTUM = 0.1
EVAL_CHUNK = 256
BLOCK_INIT_NOISE = 0.01


@dataclass(frozen=True)
class BackboneConfig:
    """Toy-scaled wide residual network.

    Args:
        in_channels, height, width: input image shape.
        num_classes: number of output logits (c >= 2).
        width_multiplier: multiplies ``base_channels`` for every layer.
        depth: number of residual blocks; blocks after the first halve the
            spatial extent while it stays even and at least 8.
        normalization: batch-norm before every activation.
        activation: "relu", or "linear" for a network whose input gradient is
            constant.
    """

    in_channels: int = 3
    height: int = 16
    width: int = 16
    num_classes: int = 2
    width_multiplier: int = 1
    depth: int = 2
    normalization: bool = True
    base_channels: int = 8
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.depth < 1:
            raise ContractError(f"depth must be at least 1, got {self.depth}")
        if self.height < 4 or self.width < 4:
            raise ContractError(f"input extents must be at least 4, got {self.height}x{self.width}")
        if self.in_channels < 1 or self.width_multiplier < 1 or self.base_channels < 1:
            raise ContractError("channel counts and width multiplier must be positive")
        if self.activation not in ("relu", "linear"):
            raise ContractError(f"activation must be relu or linear, got {self.activation!r}")

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)


@dataclass(frozen=True)
class SelfGradBlockConfig:
    stack_depth: int = 5
    eps_block: float = 8 / 255
    channels: int = 3
    normalize_grad: bool = True
    init_gain: float = 2.0

    def __post_init__(self) -> None:
        if self.stack_depth < 1:
            raise ContractError(f"stack_depth must be at least 1, got {self.stack_depth}")
        if self.eps_block < 0:
            raise ContractError(f"eps_block must be non-negative, got {self.eps_block}")
        if self.channels < 1:
            raise ContractError(f"block channels must be positive, got {self.channels}")


def soft_loss(logits: Tensor) -> float:
    """Sum of all pre-softmax class scores."""
    return float(np.sum(logits))


@dataclass
class ForwardGraph:
    graph: TapeGraph
    x: NodeId
    logits: NodeId = -1
    objective: Optional[NodeId] = None
    bn_nodes: Dict[str, NodeId] = field(default_factory=dict)
    marks: Dict[str, NodeId] = field(default_factory=dict)


class Backbone:
    """Parameter layout and graph construction for the residual classifier."""

    def __init__(self, cfg: BackboneConfig, in_channels: Optional[int] = None):
        self.cfg = cfg
        self.in_channels = in_channels or cfg.in_channels
        self.plan = self._plan()

    def _plan(self) -> List[Tuple[int, int, int]]:
        width = self.cfg.base_channels * self.cfg.width_multiplier
        h, w = self.cfg.height, self.cfg.width
        plan, c_in = [], width
        for b in range(self.cfg.depth):
            stride = 2 if b > 0 and h % 2 == 0 and w % 2 == 0 and min(h, w) >= 8 else 1
            if stride == 2:
                h, w = h // 2, w // 2
            c_out = width * 2 ** min(b, 2)
            plan.append((c_in, c_out, stride))
            c_in = c_out
        return plan

    @property
    def features(self) -> int:
        return self.plan[-1][1]

    def init(self, rng: np.random.Generator, dtype: np.dtype) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
        params: Dict[str, Tensor] = {}
        buffers: Dict[str, Tensor] = {}

        def he(shape: Tuple[int, ...]) -> Tensor:
            fan_in = int(np.prod(shape[1:]))
            return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

        def bn(name: str, channels: int) -> None:
            if not self.cfg.normalization:
                return
            params[f"{name}.gamma"] = np.ones(channels, dtype=dtype)
            params[f"{name}.beta"] = np.zeros(channels, dtype=dtype)
            buffers[f"{name}.running_mean"] = np.zeros(channels, dtype=dtype)
            buffers[f"{name}.running_var"] = np.ones(channels, dtype=dtype)

        width = self.plan[0][0]
        params["stem.w"] = he((width, self.in_channels, 3, 3))
        for i, (c_in, c_out, stride) in enumerate(self.plan):
            bn(f"block{i}.bn1", c_in)
            params[f"block{i}.conv1.w"] = he((c_out, c_in, 3, 3))
            bn(f"block{i}.bn2", c_out)
            params[f"block{i}.conv2.w"] = he((c_out, c_out, 3, 3))
            if c_in != c_out or stride != 1:
                params[f"block{i}.shortcut.w"] = he((c_out, c_in, 1, 1))
        bn("final.bn", self.features)
        params["head.w"] = (rng.standard_normal((self.cfg.num_classes, self.features))
                            / np.sqrt(self.features)).astype(dtype)
        params["head.b"] = np.zeros(self.cfg.num_classes, dtype=dtype)
        return params, buffers

    def _act(self, g: TapeGraph, h: NodeId) -> NodeId:
        return g.relu(h) if self.cfg.activation == "relu" else h

    def _norm(self, fg: ForwardGraph, nodes: Mapping[str, NodeId], buffers: Mapping[str, Tensor],
              h: NodeId, name: str, training: bool) -> NodeId:
        if not self.cfg.normalization:
            return h
        out = fg.graph.batch_norm(
            h, nodes[f"{name}.gamma"], nodes[f"{name}.beta"], training=training,
            running_mean=buffers[f"{name}.running_mean"], running_var=buffers[f"{name}.running_var"],
            name=name,
        )
        fg.bn_nodes[name] = out
        return out

    def apply(self, fg: ForwardGraph, nodes: Mapping[str, NodeId], buffers: Mapping[str, Tensor],
              x: NodeId, training: bool) -> NodeId:
        g = fg.graph
        h = g.conv2d(x, nodes["stem.w"], padding=1, name="stem")
        for i, (_, _, stride) in enumerate(self.plan):
            pre = f"block{i}"
            a = self._act(g, self._norm(fg, nodes, buffers, h, f"{pre}.bn1", training))
            y = g.conv2d(a, nodes[f"{pre}.conv1.w"], stride=stride, padding=1, name=f"{pre}.conv1")
            y = self._act(g, self._norm(fg, nodes, buffers, y, f"{pre}.bn2", training))
            y = g.conv2d(y, nodes[f"{pre}.conv2.w"], padding=1, name=f"{pre}.conv2")
            if f"{pre}.shortcut.w" in nodes:
                short = g.conv2d(a, nodes[f"{pre}.shortcut.w"], stride=stride, name=f"{pre}.shortcut")
            else:
                short = h
            h = g.add(y, short, name=f"{pre}.out")
        h = self._act(g, self._norm(fg, nodes, buffers, h, "final.bn", training))
        return g.dense(g.mean(h, axis=(2, 3), name="pool"), nodes["head.w"], nodes["head.b"], name="head")


class TapeModel:
    """Parameters, buffers and the evaluation plumbing shared by all models.

    Subclasses implement ``build_logits``; every evaluation builds a private
    TapeGraph whose leaves are ``"x"`` plus one leaf per parameter.
    """

    kind = "base"

    def __init__(self, backbone_cfg: BackboneConfig, seed: int = 0, dtype: Any = np.float64):
        self.backbone_cfg = backbone_cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}
        self.training = False
        self.metadata: Dict[str, Any] = {}

    # ---- graph construction -------------------------------------------------

    def build_logits(self, fg: ForwardGraph, nodes: Mapping[str, NodeId],
                     labels: Optional[np.ndarray], **options: Any) -> NodeId:
        raise NotImplementedError

    def build(self, labels: Optional[np.ndarray] = None, objective: Optional[str] = None,
              reduction: str = "mean", kappa: float = 0.0, **options: Any) -> ForwardGraph:
        g = TapeGraph()
        fg = ForwardGraph(graph=g, x=g.leaf("x"))
        nodes = {name: g.leaf(name) for name in self.params}
        fg.logits = self.build_logits(fg, nodes, labels, **options)
        if objective == "cross_entropy":
            fg.objective = g.softmax_cross_entropy(fg.logits, labels, reduction=reduction)
        elif objective == "cw_margin":
            fg.objective = g.margin(fg.logits, labels, kappa=kappa)
        elif objective is not None:
            raise ContractError(f"unknown objective {objective!r}")
        return fg

    def bindings(self, x: Tensor) -> Dict[str, Tensor]:
        return {"x": np.asarray(x, dtype=self.dtype), **self.params}

    def check_input(self, x: Tensor) -> None:
        cfg = self.backbone_cfg
        if np.ndim(x) != 4 or tuple(np.shape(x)[1:]) != cfg.input_shape:
            raise ContractError(f"expected input of shape (N, {cfg.in_channels}, {cfg.height}, "
                                f"{cfg.width}), got {np.shape(x)}")

    def run(self, fg: ForwardGraph, x: Tensor) -> Tensor:
        """Evaluate ``fg`` on ``x``; in training mode also refresh running statistics."""
        self.check_input(x)
        fg.graph.forward(self.bindings(x))
        if self.training:
            self._update_running_stats(fg)
        return fg.graph.value(fg.logits)

    def _update_running_stats(self, fg: ForwardGraph) -> None:
        for name, node in fg.bn_nodes.items():
            cache = fg.graph.nodes[node].cache
            mean_key, var_key = f"{name}.running_mean", f"{name}.running_var"
            self.buffers[mean_key] = ((1 - BN_MOMENTUM) * self.buffers[mean_key]
                                      + BN_MOMENTUM * cache["batch_mean"]).astype(self.dtype)
            self.buffers[var_key] = ((1 - BN_MOMENTUM) * self.buffers[var_key]
                                     + BN_MOMENTUM * cache["batch_var_unbiased"]).astype(self.dtype)

    # ---- evaluation ---------------------------------------------------------

    def train(self, mode: bool = True) -> "TapeModel":
        self.training = mode
        return self

    def eval(self) -> "TapeModel":
        return self.train(False)

    def logits(self, x: Tensor, labels: Optional[np.ndarray] = None, **options: Any) -> Tensor:
        """Logits for a batch, evaluated in chunks outside training mode."""
        chunk = len(x) if self.training else EVAL_CHUNK
        out = []
        for start in range(0, len(x), chunk):
            part = None if labels is None else labels[start:start + chunk]
            fg = self.build(part, **options)
            out.append(self.run(fg, x[start:start + chunk]))
        return np.concatenate(out, axis=0)

    def predict(self, x: Tensor, labels: Optional[np.ndarray] = None, **options: Any) -> np.ndarray:
        """Arg-max class per sample; ties go to the lowest index."""
        return np.argmax(self.logits(x, labels, **options), axis=1)

    def input_gradient(self, x: Tensor, labels: np.ndarray, objective: str = "cross_entropy",
                       kappa: float = 0.0, **options: Any) -> Tuple[Tensor, Tensor]:
        """(logits, gradient of the summed attack objective w.r.t. x)."""
        fg = self.build(labels, objective=objective, reduction="sum", kappa=kappa, **options)
        logits = self.run(fg, x)
        return logits, fg.graph.grad_wrt(fg.objective, "x")

    def loss_and_grads(self, x: Tensor, labels: np.ndarray) -> Tuple[float, Tensor, Dict[str, Tensor]]:
        """Mean cross-entropy, logits and parameter gradients for one batch."""
        fg = self.build(labels, objective="cross_entropy")
        logits = self.run(fg, x)
        loss = float(fg.graph.value(fg.objective))
        return loss, logits, fg.graph.grads(fg.objective, list(self.params))

    # ---- state --------------------------------------------------------------

    def state(self) -> Dict[str, Tensor]:
        return {**self.params, **self.buffers}

    def load_state(self, tensors: Mapping[str, Tensor]) -> None:
        expected = self.state()
        missing = sorted(set(expected) - set(tensors))
        unknown = sorted(set(tensors) - set(expected))
        if missing or unknown:
            raise ContractError(f"state mismatch: missing {missing}, unexpected {unknown}")
        for name, value in tensors.items():
            if tuple(np.shape(value)) != expected[name].shape:
                raise ContractError(f"{name}: expected shape {expected[name].shape}, got {np.shape(value)}")
            target = self.params if name in self.params else self.buffers
            target[name] = np.array(value, dtype=self.dtype)

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name]).tobytes())
        return digest.hexdigest()

    def clone(self) -> "TapeModel":
        return copy.deepcopy(self)

    def astype(self, dtype: Any) -> "TapeModel":
        twin = self.clone()
        twin.dtype = np.dtype(dtype)
        twin.params = {k: v.astype(twin.dtype) for k, v in self.params.items()}
        twin.buffers = {k: v.astype(twin.dtype) for k, v in self.buffers.items()}
        return twin

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "backbone": asdict(self.backbone_cfg)}


def init_block(cfg: SelfGradBlockConfig, input_size: int, rng: np.random.Generator,
               dtype: np.dtype) -> Dict[str, Tensor]:
    """Near-identity stack that starts out as a smooth sign of its input.

    The first layer is scaled by sqrt(input_size), which brings an
    L2-standardized gradient back to unit RMS; later layers use init_gain.
    """
    eye = np.eye(cfg.channels)
    first_gain = np.sqrt(input_size) if cfg.normalize_grad else cfg.init_gain
    weights = {}
    for i in range(cfg.stack_depth):
        gain = first_gain if i == 0 else cfg.init_gain
        noise = BLOCK_INIT_NOISE * rng.standard_normal((cfg.channels, cfg.channels))
        weights[f"sg.{i}.w"] = (gain * (eye + noise)).astype(dtype)
    return weights


class SGNetwork(TapeModel):
    """Backbone classifier with a self-gradient block and two-pass forward."""

    kind = "sgnet"

    def __init__(self, backbone_cfg: BackboneConfig = BackboneConfig(),
                 block_cfg: Optional[SelfGradBlockConfig] = None, block_enabled: bool = True,
                 seed: int = 0, dtype: Any = np.float64, loops: int = 1):
        super().__init__(backbone_cfg, seed, dtype)
        self.block_cfg = block_cfg or SelfGradBlockConfig(channels=backbone_cfg.in_channels)
        if self.block_cfg.channels != backbone_cfg.in_channels:
            raise ContractError(f"block has {self.block_cfg.channels} channels but the input has "
                                f"{backbone_cfg.in_channels}")
        if loops < 1:
            raise ContractError(f"loops must be at least 1, got {loops}")
        self.block_enabled = block_enabled
        self.loops = loops
        self.backbone = Backbone(backbone_cfg)
        rng = np.random.default_rng(seed)
        self.params, self.buffers = self.backbone.init(rng, self.dtype)
        input_size = int(np.prod(backbone_cfg.input_shape))
        self.params.update(init_block(self.block_cfg, input_size, rng, self.dtype))

    @property
    def eps_block(self) -> float:
        return self.block_cfg.eps_block

    @property
    def standardization(self) -> str:
        return "l2" if self.block_cfg.normalize_grad else "none"

    def block_graph(self, g: TapeGraph, nodes: Mapping[str, NodeId], grad: NodeId) -> NodeId:
        h = grad
        for i in range(self.block_cfg.stack_depth):
            h = g.tanh(g.conv1x1(h, nodes[f"sg.{i}.w"], name=f"sg.{i}"))
        return g.scale(h, self.eps_block, name="sg.delta")

    def inject(self, fg: ForwardGraph, nodes: Mapping[str, NodeId], grad: NodeId) -> NodeId:
        g = fg.graph
        delta = self.block_graph(g, nodes, grad)
        injected = g.clamp(g.add(fg.x, delta), 0.0, 1.0, name="injected")
        fg.marks.update(grad=grad, delta=delta, injected=injected)
        return injected

    def build_logits(self, fg: ForwardGraph, nodes: Mapping[str, NodeId],
                     labels: Optional[np.ndarray], block_enabled: Optional[bool] = None,
                     loops: Optional[int] = None, prior: Optional[Tensor] = None) -> NodeId:
        """Logits of the block-enabled (or plain) network.

        Every backbone application re-registers its batch-norm nodes, so in
        training mode the running statistics are refreshed from the last
        application only (the injected pass), never from pass 1.
        """
        g = fg.graph
        enabled = self.block_enabled if block_enabled is None else block_enabled
        if not enabled:
            return self.backbone.apply(fg, nodes, self.buffers, fg.x, self.training)
        if prior is not None:
            grad = g.const(standardize_per_sample(np.asarray(prior, dtype=self.dtype), self.standardization))
            return self.backbone.apply(fg, nodes, self.buffers, self.inject(fg, nodes, grad), self.training)
        logits = self.backbone.apply(fg, nodes, self.buffers, fg.x, self.training)
        fg.marks["pass1_logits"] = logits
        for _ in range(self.loops if loops is None else loops):
            soft = g.sum(logits, name="soft_loss")
            grad = g.input_grad(soft, fg.x, standardize=self.standardization, name="soft_grad")
            logits = self.backbone.apply(fg, nodes, self.buffers, self.inject(fg, nodes, grad), self.training)
        return logits

    # ---- named operations ---------------------------------------------------

    def backbone_forward(self, x: Tensor) -> Tensor:
        return self.logits(x, block_enabled=False)

    def two_pass_forward(self, x: Tensor, loops: int = 1) -> Tensor:
        if loops < 1:
            raise ContractError(f"loops must be at least 1, got {loops}")
        return self.logits(x, block_enabled=True, loops=loops)

    def predict(self, x: Tensor, labels: Optional[np.ndarray] = None,
                block_enabled: Optional[bool] = None, **options: Any) -> np.ndarray:
        return super().predict(x, labels, block_enabled=block_enabled, **options)

    def block_forward(self, grad: Tensor) -> Tensor:
        """eps_block * (tanh o conv1x1)^stack_depth applied to ``grad``."""
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.ndim != 4 or grad.shape[1] != self.block_cfg.channels:
            raise ContractError(f"block expects (N, {self.block_cfg.channels}, H, W), got {grad.shape}")
        g = TapeGraph()
        nodes = {f"sg.{i}.w": g.leaf(f"sg.{i}.w") for i in range(self.block_cfg.stack_depth)}
        g_leaf = g.leaf("g")
        self.block_graph(g, nodes, g_leaf)
        bindings = {name: self.params[name] for name in nodes}
        bindings["g"] = grad
        return g.forward(bindings)

    def soft_gradient(self, x: Tensor, prior: Optional[Tensor] = None) -> Tensor:
        """Raw soft-loss input gradient, with ``prior`` injected through the block.

        Without a prior this is the pass-1 gradient (no injection).
        """
        self.check_input(x)
        if prior is None:
            fg = self.build(block_enabled=False)
        else:
            fg = self.build(block_enabled=True, prior=prior)
        soft = fg.graph.sum(fg.logits, name="soft_loss")
        fg.graph.forward(self.bindings(x))
        return fg.graph.grad_wrt(soft, "x")

    def describe(self) -> Dict[str, Any]:
        out = super().describe()
        out.update(block=asdict(self.block_cfg), block_enabled=self.block_enabled, loops=self.loops)
        return out


class OracleGradientNetwork(TapeModel):
    """Backbone fed with the image and its labelled cross-entropy input gradient.

    The gradient is taken on the same backbone with the extra channels
    blanked, then RMS-standardized and detached. ``zero_oracle`` keeps the
    extra channels at zero.
    """

    kind = "oracle"

    def __init__(self, backbone_cfg: BackboneConfig = BackboneConfig(), seed: int = 0,
                 dtype: Any = np.float64, zero_oracle: bool = False):
        super().__init__(backbone_cfg, seed, dtype)
        self.zero_oracle = zero_oracle
        self.backbone = Backbone(backbone_cfg, in_channels=2 * backbone_cfg.in_channels)
        self.params, self.buffers = self.backbone.init(np.random.default_rng(seed), self.dtype)

    def build_logits(self, fg: ForwardGraph, nodes: Mapping[str, NodeId],
                     labels: Optional[np.ndarray], **options: Any) -> NodeId:
        if labels is None:
            raise ContractError("the oracle-gradient model needs labels")
        g = fg.graph
        blank = g.detach(g.scale(fg.x, 0.0))
        logits = self.backbone.apply(fg, nodes, self.buffers, g.concat([fg.x, blank]), self.training)
        if self.zero_oracle:
            return logits
        ce = g.softmax_cross_entropy(logits, labels, reduction="sum")
        oracle = g.input_grad(ce, fg.x, standardize="rms", name="oracle_grad")
        fg.marks["oracle"] = oracle
        return self.backbone.apply(fg, nodes, self.buffers, g.concat([fg.x, oracle]), self.training)

    def describe(self) -> Dict[str, Any]:
        out = super().describe()
        out.update(zero_oracle=self.zero_oracle)
        return out


def build_model(description: Mapping[str, Any], dtype: Any = np.float64) -> TapeModel:
    """Reconstruct an (untrained) model from ``TapeModel.describe()`` output."""
    backbone = BackboneConfig(**description["backbone"])
    kind = description.get("kind")
    if kind == SGNetwork.kind:
        return SGNetwork(backbone, SelfGradBlockConfig(**description["block"]),
                         block_enabled=description.get("block_enabled", True),
                         dtype=dtype, loops=description.get("loops", 1))
    if kind == OracleGradientNetwork.kind:
        return OracleGradientNetwork(backbone, dtype=dtype, zero_oracle=description.get("zero_oracle", False))
    raise ContractError(f"unknown model kind {kind!r}")
