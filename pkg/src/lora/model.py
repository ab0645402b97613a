"""Frozen base perceptron and the continual model that stacks adapters on it."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.data.synthetic import TaskDataset, minibatches
from src.lora.adapter import LoraAdapter, delta, new_adapter
from src.nn.optim import Adam
from src.nn.tape import Matrix, Tape, add, add_row, grad, matmul, softmax_xent, tanh_map
from src.shared.errors import ShapeError

LOGGER = logging.getLogger(__name__)

WeightPair = Tuple[Matrix, Matrix]
HistoryFn = Callable[[List[Matrix], Tuple[int, int]], Matrix]


@dataclass(frozen=True)
class DenseLayer:
    layer_id: str
    weight: Matrix  # d x k, applied as x @ W
    bias: Matrix  # 1 x k

    @property
    def dims(self) -> Tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True)
class BaseModel:
    """Pretrained weights; never modified after :func:`pretrain_base` returns."""

    layers: Tuple[DenseLayer, ...]
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.rows

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.cols

    @property
    def layer_ids(self) -> List[str]:
        return [layer.layer_id for layer in self.layers]

    def layer(self, layer_id: str) -> DenseLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(f"no layer {layer_id!r}; have {self.layer_ids}")

    def weights(self) -> List[WeightPair]:
        return [(layer.weight, layer.bias) for layer in self.layers]


def mlp_forward(weights: Sequence[WeightPair], x: Matrix, activation: str = "tanh") -> Matrix:
    """x -> tanh(x W1 + b1) -> ... -> x Wn + bn (no activation on the logits)."""
    if activation != "tanh":
        raise ValueError(f"unsupported activation {activation!r}")
    if x.cols != weights[0][0].rows:
        raise ShapeError("forward", x.shape, weights[0][0].shape, detail="input width must match first layer")
    h = x
    for idx, (w, b) in enumerate(weights):
        h = add_row(matmul(h, w), b)
        if idx < len(weights) - 1:
            h = tanh_map(h)
    return h


def compose_weight(w0: Matrix, history: Matrix, update: Optional[Matrix] = None) -> Matrix:
    """W0 + history (+ update), always summed in this order."""
    w = add(w0, history)
    return add(w, update) if update is not None else w


def sum_history(deltas: List[Matrix], dims: Tuple[int, int]) -> Matrix:
    total = Matrix.zeros(*dims)
    for d in deltas:
        total = add(total, d)
    return total


def adapter_seed(seed: int, task_index: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, position]).generate_state(1)[0])


class ContinualModel:
    """Base model plus frozen adapters of tasks 1..t-1 and one active adapter per layer.

    The frozen contribution of each layer is computed once per task and held as
    a constant matrix, so frozen adapters never reach the tape.
    """

    def __init__(
        self,
        base: BaseModel,
        injected: Optional[Sequence[str]] = None,
        scaling: float = 1.0,
        combine_history: HistoryFn = sum_history,
    ) -> None:
        self.base = base
        self.injected: List[str] = list(injected) if injected is not None else base.layer_ids
        self.scaling = scaling
        self.combine_history = combine_history
        self.frozen: Dict[str, List[LoraAdapter]] = {lid: [] for lid in self.injected}
        self.active: Dict[str, LoraAdapter] = {}
        self._history: Dict[str, Matrix] = {}
        self.refresh_history()

    @property
    def task_count(self) -> int:
        return len(self.frozen[self.injected[0]]) if self.injected else 0

    def refresh_history(self) -> None:
        for lid in self.injected:
            dims = self.base.layer(lid).dims
            deltas = [delta(a, self.scaling) for a in self.frozen[lid]]
            self._history[lid] = self.combine_history(deltas, dims) if deltas else Matrix.zeros(*dims)

    def history(self, layer_id: str) -> Matrix:
        return self._history[layer_id]

    def begin_task(self, task_index: int, rank: int, seed: int) -> Dict[str, LoraAdapter]:
        self.active = {
            lid: new_adapter(
                self.base.layer(lid).dims,
                rank,
                adapter_seed(seed, task_index, pos),
                task_index=task_index,
                layer_id=lid,
            )
            for pos, lid in enumerate(self.injected)
        }
        return dict(self.active)

    def set_active(self, adapters: Dict[str, LoraAdapter]) -> None:
        self.active = dict(adapters)

    def commit(self, adapters: Optional[Dict[str, LoraAdapter]] = None) -> Dict[str, LoraAdapter]:
        """Freeze the active adapters (or replacements for them) and rebuild the history."""
        chosen = dict(adapters) if adapters is not None else dict(self.active)
        for lid in self.injected:
            self.frozen[lid].append(chosen[lid])
        self.active = {}
        self.refresh_history()
        return chosen

    def active_delta(self, layer_id: str) -> Optional[Matrix]:
        adapter = self.active.get(layer_id)
        return delta(adapter, self.scaling) if adapter is not None else None

    def effective_weights(self) -> List[WeightPair]:
        pairs: List[WeightPair] = []
        for layer in self.base.layers:
            if layer.layer_id in self._history:
                w = compose_weight(layer.weight, self._history[layer.layer_id], self.active_delta(layer.layer_id))
            else:
                w = layer.weight
            pairs.append((w, layer.bias))
        return pairs

    def adapters_by_layer(self) -> Dict[str, List[LoraAdapter]]:
        return {lid: list(adapters) for lid, adapters in self.frozen.items()}


def forward(model: ContinualModel, x: Matrix) -> Matrix:
    """Logits under W0 + history + delta(active) for every injected layer."""
    return mlp_forward(model.effective_weights(), x, model.base.activation)


def init_base(dims: Sequence[int], seed: int) -> BaseModel:
    rng = np.random.default_rng(seed)
    layers = []
    for idx, (d, k) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        w = Matrix(rng.normal(scale=1.0 / np.sqrt(d), size=(d, k)))
        layers.append(DenseLayer(layer_id=f"fc{idx}", weight=w, bias=Matrix.zeros(1, k)))
    return BaseModel(layers=tuple(layers))


def pretrain_base(
    dataset: TaskDataset,
    hidden_dim: int,
    n_classes: int,
    epochs: int = 20,
    learning_rate: float = 1e-2,
    batch_size: int = 32,
    seed: int = 0,
    progress: bool = False,
) -> BaseModel:
    """Fit every base weight on the generic mixture, then freeze."""
    model = init_base([dataset.x_train.shape[1], hidden_dim, n_classes], seed)
    params: Dict[str, Matrix] = {}
    for layer in model.layers:
        params[f"{layer.layer_id}.weight"] = layer.weight
        params[f"{layer.layer_id}.bias"] = layer.bias
    optimizer = Adam(learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    for epoch in tqdm(range(epochs), desc="pretrain", disable=not progress):
        epoch_loss = 0.0
        batches = 0
        for idx in minibatches(dataset.size, batch_size, rng):
            x = Matrix(dataset.x_train[idx])
            with Tape() as tape:
                tape.watch(*params.values())
                weights = [
                    (params[f"{layer.layer_id}.weight"], params[f"{layer.layer_id}.bias"]) for layer in model.layers
                ]
                loss = softmax_xent(mlp_forward(weights, x), dataset.y_train[idx])
            grads = grad(tape, loss)
            params = optimizer.step(params, {name: grads[p] for name, p in params.items()})
            epoch_loss += loss.item()
            batches += 1
        LOGGER.debug("pretrain epoch %d loss %.4f", epoch + 1, epoch_loss / max(batches, 1))
    layers = tuple(
        DenseLayer(layer.layer_id, params[f"{layer.layer_id}.weight"], params[f"{layer.layer_id}.bias"])
        for layer in model.layers
    )
    return BaseModel(layers=layers, activation=model.activation)


__all__ = [
    "BaseModel",
    "ContinualModel",
    "DenseLayer",
    "WeightPair",
    "adapter_seed",
    "compose_weight",
    "forward",
    "init_base",
    "mlp_forward",
    "pretrain_base",
    "sum_history",
]
