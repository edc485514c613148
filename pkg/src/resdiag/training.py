"""Training loop: response BCE plus edge-flip consistency.

Each epoch draws a fresh flip of the response-edge types, shuffles the
train logs, and for every batch recomputes the node embeddings on both
the original and the flipped graph.  The batch loss is

    sum BCE(predictions, responses)
    + lambda_reg * (batch / train_size) * consistency(H', H)

where the consistency term compares the student rows of the two pooled
embeddings.  Early stopping tracks validation AUC with a patience
window and the best-epoch parameters are restored at the end.

Ablation switches (the tokens follow the CLI):

==============  ========================================================
``or``          full pipeline
``or-wo-rgc``   channel-blind convolution on the untyped response graph
``or-wo-reg``   response-aware convolution, no consistency term
``ol``          no graph at all: the base model reads free embeddings
==============  ========================================================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cdm import DiagnosisModel, IrtModel, MonotoneMlpModel
from .data import Dataset, Split, build_interaction_matrix
from .errors import ConfigError, DataError, NumericsError, UndefinedMetricError
from .graph import ResponseGraph, build_response_graph, flip_edges, normalize_adjacency
from .metrics import MetricReport, accuracy, auc, doa, mnd
from .rgc import ACTIVATIONS, RgcParams, TransformParams, propagate, propagate_plain, transform
from .seeding import derive_seed, substream

CDMS = ("ncdm", "irt")
ABLATIONS = ("or", "or-wo-rgc", "or-wo-reg", "ol")
CONSISTENCY_FORMS = ("cosine", "dot")

# probabilities are kept this far away from {0, 1} inside the BCE
PROB_CLIP = 1e-9


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the recommended operating point."""

    cdm: str = "ncdm"
    ablation: str = "or"
    dim: int = 32
    n_layers: int = 3
    activation: str = "tanh"
    flip_ratio: float = 0.15
    lambda_reg: float = 1e-3
    tau: float = 0.5
    consistency: str = "cosine"
    learning_rate: float = 4e-3
    batch_size: int = 4096
    max_epochs: int = 100
    patience: int = 5
    mlp_hidden: tuple[int, int] = (512, 256)
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.cdm not in CDMS:
            raise ConfigError(f"cdm must be one of {CDMS}, got {self.cdm!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.consistency not in CONSISTENCY_FORMS:
            raise ConfigError(
                f"consistency must be one of {CONSISTENCY_FORMS}, got {self.consistency!r}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dim < 1 or self.n_layers < 1:
            raise ConfigError("dim and n_layers must be positive")
        if not 0.0 <= self.flip_ratio <= 1.0:
            raise ConfigError(f"flip_ratio must be in [0, 1], got {self.flip_ratio}")
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be non-negative, got {self.lambda_reg}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if len(self.mlp_hidden) != 2 or min(self.mlp_hidden) < 1:
            raise ConfigError(f"mlp_hidden must be two positive sizes, got {self.mlp_hidden}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        payload = dict(payload)
        if "mlp_hidden" in payload:
            payload["mlp_hidden"] = tuple(int(h) for h in payload["mlp_hidden"])
        return cls(**payload).validate()

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mlp_hidden"] = list(self.mlp_hidden)
        return out


def bce_loss(predictions: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
    """Sum-form binary cross-entropy; probabilities clipped away from 0/1."""
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] != predictions.shape[0]:
        raise ValueError("labels do not match predictions")
    p = ad.clamp(predictions, PROB_CLIP, 1.0 - PROB_CLIP)
    pos = ad.elementwise_mul(ad.constant(y), ad.log(p))
    neg = ad.elementwise_mul(ad.constant(1.0 - y), ad.log(ad.affine(p, -1.0, 1.0)))
    return ad.affine(ad.total_sum(ad.add(pos, neg)), -1.0)


def consistency_loss(
    flipped_rows: ad.Tensor, original_rows: ad.Tensor, tau: float, form: str = "cosine"
) -> tuple[ad.Tensor, int]:
    """Alignment of per-student embeddings across the edge flip.

    The ``cosine`` form is bounded: -sum_s cos(h'_s, h_s) / tau, with
    rows of (numerically) zero norm on either side left out; the count
    of dropped rows is returned.  The ``dot`` form is the raw
    -sum_s h'_s . h_s / tau, which is scale-sensitive and kept only as
    an explicit opt-in.
    """
    if flipped_rows.shape != original_rows.shape:
        raise ValueError("consistency_loss needs matching row blocks")
    if form == "dot":
        total = ad.total_sum(ad.row_dot(flipped_rows, original_rows))
        return ad.affine(total, -1.0 / tau), 0
    if form != "cosine":
        raise ConfigError(f"consistency must be one of {CONSISTENCY_FORMS}, got {form!r}")
    norms_flip = np.linalg.norm(flipped_rows.value, axis=1)
    norms_orig = np.linalg.norm(original_rows.value, axis=1)
    keep = np.flatnonzero((norms_flip > 1e-12) & (norms_orig > 1e-12))
    skipped = flipped_rows.shape[0] - keep.size
    if keep.size == 0:
        return ad.constant(0.0), skipped
    a = ad.gather_rows(flipped_rows, keep)
    b = ad.gather_rows(original_rows, keep)
    dots = ad.row_dot(a, b)
    scale = ad.elementwise_mul(
        ad.sqrt(ad.row_dot(a, a)), ad.sqrt(ad.row_dot(b, b))
    )
    cos = ad.elementwise_div(dots, scale)
    return ad.affine(ad.total_sum(cos), -1.0 / tau), skipped


@dataclass
class EpochRow:
    epoch: int
    loss: float
    valid_auc: float | None
    valid_accuracy: float | None


def _untyped_adjacency(graph: ResponseGraph):
    union = (graph.a_right + graph.a_wrong).tocsr()
    union.data[:] = 1.0  # Q edges sit in both channels; keep the graph binary
    return normalize_adjacency(union)


class TrainedModel:
    """A trained diagnosis pipeline: frozen parameters plus evaluation helpers."""

    def __init__(
        self,
        *,
        config: TrainConfig,
        dataset: Dataset,
        split: Split,
        cdm_model: DiagnosisModel,
        rgc_params: RgcParams | None,
        plain_h0: ad.Tensor | None,
        transform_params: TransformParams | None,
        graph: ResponseGraph | None,
        adjacencies,
    ):
        self.config = config
        self.dataset = dataset
        self.split = split
        self.cdm_model = cdm_model
        self.rgc_params = rgc_params
        self.plain_h0 = plain_h0
        self.transform_params = transform_params
        self.graph = graph
        self.adjacencies = adjacencies  # (right, wrong) or (union,) or ()
        self.best_epoch: int = -1
        self.best_valid_auc: float | None = None
        self.pooled_snapshot: np.ndarray | None = None
        self.epoch_rows: list[EpochRow] = []

    @property
    def base_embedding(self) -> ad.Tensor:
        return self.rgc_params.h0 if self.rgc_params is not None else self.plain_h0

    def parameter_tensors(self) -> dict[str, ad.Tensor]:
        named: dict[str, ad.Tensor] = {}
        if self.rgc_params is not None:
            named.update(self.rgc_params.tensors())
        else:
            named["h0"] = self.plain_h0
        if self.transform_params is not None:
            named.update(self.transform_params.tensors())
        named.update(self.cdm_model.tensors())
        return named

    def pooled(self) -> ad.Tensor:
        """Node embeddings after propagation (before any concept projection)."""
        ablation = self.config.ablation
        if ablation == "ol":
            return self.base_embedding
        if ablation == "or-wo-rgc":
            return propagate_plain(self.plain_h0, self.adjacencies[0], self.config.n_layers).pooled
        return propagate(self.rgc_params, *self.adjacencies).pooled

    def cdm_input(self, pooled: ad.Tensor) -> ad.Tensor:
        if self.transform_params is not None:
            return transform(pooled, self.transform_params)
        return pooled

    def predictions(self, triplets: np.ndarray) -> np.ndarray:
        t = np.asarray(triplets)
        emb = self.cdm_input(self.pooled())
        return self.cdm_model.predict(emb, t[:, 0], t[:, 1]).value.ravel()

    def proficiency(self) -> np.ndarray:
        return self.cdm_model.proficiency(self.cdm_input(self.pooled()).value)

    def mastery(self) -> np.ndarray:
        return self.cdm_model.mastery(self.cdm_input(self.pooled()).value)

    def evaluate(self, triplets: np.ndarray, doa_triplets: np.ndarray | None = None) -> MetricReport:
        t = np.asarray(triplets)
        scores = self.predictions(t)
        labels = t[:, 2]
        report = MetricReport(
            auc=auc(scores, labels),
            accuracy=accuracy(scores, labels),
            n_scored=int(t.shape[0]),
        )
        if self.cdm_model.concept_indexed:
            mastery = self.mastery()
            report.mnd = mnd(mastery)
            logs = self.dataset.triplets if doa_triplets is None else doa_triplets
            try:
                report.doa = doa(mastery, logs, self.dataset.q_matrix)
            except UndefinedMetricError:
                report.doa = None
        return report


def _build_components(dataset: Dataset, split: Split, config: TrainConfig):
    """Assemble graph, embeddings, projection and base model for one run."""
    rng = substream(config.seed, "init")
    n, m, z = dataset.n_students, dataset.n_exercises, dataset.n_concepts
    n_nodes = n + m + z
    width = z if (config.ablation == "ol" and config.cdm == "ncdm") else config.dim

    graph = None
    adjacencies: tuple = ()
    rgc_params = None
    plain_h0 = None
    if config.ablation == "ol":
        plain_h0 = ad.xavier_init(n_nodes, width, rng)
    else:
        inter = build_interaction_matrix(dataset, split.train)
        graph = build_response_graph(inter, dataset.q_matrix)
        if config.ablation == "or-wo-rgc":
            plain_h0 = ad.xavier_init(n_nodes, width, rng)
            adjacencies = (_untyped_adjacency(graph),)
        else:
            rgc_params = RgcParams.init(
                n_nodes, width, config.n_layers, rng, activation=config.activation
            )
            adjacencies = (
                normalize_adjacency(graph.a_right),
                normalize_adjacency(graph.a_wrong),
            )

    transform_params = None
    if config.cdm == "ncdm":
        cdm_model = MonotoneMlpModel(n, m, dataset.q_matrix, rng, hidden=config.mlp_hidden)
        if config.ablation != "ol":
            transform_params = TransformParams.init(n_nodes, width, z, rng)
    else:
        cdm_model = IrtModel(n, m, width, rng)

    return TrainedModel(
        config=config,
        dataset=dataset,
        split=split,
        cdm_model=cdm_model,
        rgc_params=rgc_params,
        plain_h0=plain_h0,
        transform_params=transform_params,
        graph=graph,
        adjacencies=adjacencies,
    )


def _flip_adjacencies(model: TrainedModel, epoch: int):
    """Fresh flipped-graph adjacencies for one epoch, or None when inert."""
    config = model.config
    use_reg = (
        config.ablation in ("or", "or-wo-rgc")
        and config.lambda_reg > 0
        and config.flip_ratio > 0
    )
    if not use_reg:
        return None
    seed = derive_seed(config.seed, f"flip:{epoch}")
    flipped, _plan = flip_edges(model.graph, config.flip_ratio, seed)
    if config.ablation == "or-wo-rgc":
        return (_untyped_adjacency(flipped),)
    return (normalize_adjacency(flipped.a_right), normalize_adjacency(flipped.a_wrong))


def _pooled_for(model: TrainedModel, adjacencies) -> ad.Tensor:
    if model.config.ablation == "or-wo-rgc":
        return propagate_plain(model.plain_h0, adjacencies[0], model.config.n_layers).pooled
    return propagate(model.rgc_params, *adjacencies).pooled


def train(dataset: Dataset, split: Split, config: TrainConfig, verbose: bool = False) -> TrainedModel:
    """Fit a diagnosis model; returns it with best-epoch parameters restored."""
    config.validate()
    if split.train.shape[0] == 0:
        raise DataError("cannot train on an empty train split")
    model = _build_components(dataset, split, config)
    named = model.parameter_tensors()
    optimizer = ad.Adam(list(named.values()), config.learning_rate)
    model.cdm_model.clamp_weights()

    train_t = split.train
    n_train = train_t.shape[0]
    n_students = dataset.n_students
    student_rows = np.arange(n_students)
    has_valid = split.valid.shape[0] > 0

    best_score = -np.inf
    best_state: dict[str, np.ndarray] = {}
    best_epoch = -1
    stale = 0

    for epoch in range(config.max_epochs):
        flipped_adj = _flip_adjacencies(model, epoch)
        order = substream(config.seed, f"shuffle:{epoch}").permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = train_t[order[start : start + config.batch_size]]
            with ad.Tape() as tape:
                if model.config.ablation == "ol":
                    pooled = model.base_embedding
                else:
                    pooled = _pooled_for(model, model.adjacencies)
                emb = model.cdm_input(pooled)
                preds = model.cdm_model.predict(emb, batch[:, 0], batch[:, 1])
                loss = bce_loss(preds, batch[:, 2])
                if flipped_adj is not None:
                    pooled_flip = _pooled_for(model, flipped_adj)
                    reg, _skipped = consistency_loss(
                        ad.gather_rows(pooled_flip, student_rows),
                        ad.gather_rows(pooled, student_rows),
                        config.tau,
                        config.consistency,
                    )
                    weight = config.lambda_reg * batch.shape[0] / n_train
                    loss = ad.add(loss, ad.affine(reg, weight))
            if not np.isfinite(loss.item()):
                raise NumericsError(f"training diverged at epoch {epoch}: loss={loss.item()}")
            tape.backward(loss)
            optimizer.step()
            model.cdm_model.clamp_weights()
            epoch_loss += loss.item()

        valid_auc = valid_acc = None
        if has_valid:
            scores = model.predictions(split.valid)
            labels = split.valid[:, 2]
            valid_acc = accuracy(scores, labels)
            try:
                valid_auc = auc(scores, labels)
                score = valid_auc
            except UndefinedMetricError:
                # single-class validation set: fall back to accuracy
                score = valid_acc
            if score > best_score:
                best_score = score
                best_epoch = epoch
                best_state = {k: t.value.copy() for k, t in named.items()}
                stale = 0
            else:
                stale += 1
        model.epoch_rows.append(EpochRow(epoch, epoch_loss, valid_auc, valid_acc))
        if verbose:
            print(f"epoch {epoch}: loss={epoch_loss:.4f} valid_auc={valid_auc} valid_acc={valid_acc}")
        if has_valid and stale >= config.patience:
            break

    if has_valid and best_state:
        for key, tensor in named.items():
            tensor.value[...] = best_state[key]
        model.best_epoch = best_epoch
        row = model.epoch_rows[best_epoch]
        model.best_valid_auc = row.valid_auc
    else:
        model.best_epoch = len(model.epoch_rows) - 1
    model.pooled_snapshot = model.pooled().value.copy()
    return model
