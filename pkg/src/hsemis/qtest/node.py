"""Quantum-infused teacher/student node: forward pass, objectives, EMA and training loop."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, ShapeError
from ..nn import functional as F
from ..nn.optim import Adam
from ..nn.tensor import Tensor, as_tensor, no_grad
from ..qcn import QcnParams, qcn_layer
from .augment import AugmentationSpec, strong_augment, weak_augment
from .network import FILTERS, BaseNetwork, l2_tanh_normalize, project

log = logging.getLogger(__name__)

ROLES = ("teacher", "student")


@dataclass
class NodeConfig:
    steps: int = 300
    labeled_per_step: int = 4
    unlabeled_per_step: int = 4
    mu: float = 0.99
    lr: float = 3e-4
    weight_decay: float = 3e-4
    qcn_lr: float = 1e-3
    lambda_schedule: str = "ramp"  # ramp | constant | off
    lambda_max: float = 1.0
    ramp_fraction: float = 0.2
    omega: float = 1.0
    eval_every: int = 20
    patience: int = 10
    eval_role: str = "teacher"
    n_qubits: int = 8
    qcn_layers: int = 3
    wire: int | None = None
    filters: tuple[int, ...] = FILTERS
    fc_dims: tuple[int, int] = (1024, 512)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0


class NodeModel:
    """Student and EMA teacher base networks sharing one set of QCN angles."""

    def __init__(self, rng_student, rng_teacher, qcn: QcnParams, channels: int = 1, mu: float = 0.99,
                 omega: float = 1.0, wire: int | None = None, filters=FILTERS, fc_dims=(1024, 512)):
        if not 0.0 < mu < 1.0:
            raise ValueError("mu must lie in (0, 1)")
        proj_dim = 2**qcn.layout.n_qubits
        self.student = BaseNetwork(rng_student, channels, filters, fc_dims, proj_dim)
        # the teacher is only ever evaluated under no_grad and is not given to an optimizer
        self.teacher = BaseNetwork(rng_teacher, channels, filters, fc_dims, proj_dim)
        self.qcn = qcn
        self.mu = mu
        self.omega = omega
        self.wire = qcn.layout.default_wire if wire is None else wire

    @classmethod
    def create(cls, seed: int, channels: int = 1, config: NodeConfig | None = None) -> "NodeModel":
        config = config or NodeConfig()
        s_seed, t_seed, q_seed = np.random.SeedSequence(seed).spawn(3)
        qcn = QcnParams.random(np.random.default_rng(q_seed), config.n_qubits, config.qcn_layers)
        return cls(np.random.default_rng(s_seed), np.random.default_rng(t_seed), qcn, channels,
                   config.mu, config.omega, config.wire, config.filters, config.fc_dims)

    def network(self, role: str) -> BaseNetwork:
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        return self.student if role == "student" else self.teacher

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"student.{k}": v for k, v in self.student.state_dict().items()}
        state.update({f"teacher.{k}": v for k, v in self.teacher.state_dict().items()})
        state["qcn.angles"] = self.qcn.angles.data.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.student.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("student.")})
        self.teacher.load_state_dict({k[8:]: v for k, v in state.items() if k.startswith("teacher.")})
        self.qcn.angles.data = np.array(state["qcn.angles"], dtype=np.float64)


def node_forward(model: NodeModel, x, role: str = "student") -> Tensor:
    """Images ``[B, h, w, ch]`` -> QCN class probabilities ``[B, 2]``."""
    net = model.network(role)
    f_t = project(net.features(x), net.proj_weight, net.proj_bias)
    return qcn_layer(l2_tanh_normalize(f_t, model.omega), model.qcn, model.wire)


def consistency_loss(teacher_preds, student_preds) -> Tensor:
    """Sum over samples of the squared L2 distance between prediction vectors."""
    teacher_preds, student_preds = as_tensor(teacher_preds), as_tensor(student_preds)
    if teacher_preds.shape != student_preds.shape:
        raise ShapeError(f"prediction shapes differ: {teacher_preds.shape} vs {student_preds.shape}")
    return F.squared_distance_sum(teacher_preds, student_preds)


def ema_update(model: NodeModel) -> NodeModel:
    """``teacher <- mu * teacher + (1 - mu) * student`` on base-network parameters."""
    mu = model.mu
    for t, s in zip(model.teacher.parameters(), model.student.parameters()):
        if t.shape != s.shape:
            raise ShapeError("teacher and student parameters differ in shape")
        t.data *= mu
        t.data += (1.0 - mu) * s.data
    return model


def consistency_weight(step: int, total: int, schedule: str = "ramp", lambda_max: float = 1.0,
                       ramp_fraction: float = 0.2) -> float:
    """Sigmoid ramp ``exp(-5 (1 - t)^2)`` over the first ``ramp_fraction`` of training."""
    if schedule == "off":
        return 0.0
    if schedule == "constant":
        return lambda_max
    if schedule != "ramp":
        raise ValueError(f"unknown lambda schedule {schedule!r}")
    ramp = ramp_fraction * total
    if ramp <= 0 or step >= ramp:
        return lambda_max
    t = step / ramp
    return lambda_max * float(np.exp(-5.0 * (1.0 - t) ** 2))


def predict_proba(model: NodeModel, x, role: str = "teacher", batch_size: int = 64) -> np.ndarray:
    """Eval-mode probabilities for a stack of images."""
    net = model.network(role)
    was_training = net.training
    net.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(x), batch_size):
                out.append(node_forward(model, x[i:i + batch_size], role).data)
    finally:
        net.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, 2))


@dataclass
class NodeResult:
    model: NodeModel
    history: list[dict]
    best_step: int
    stopped_early: bool

    def history_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,sup_loss,con_loss,val_acc\n")
        for row in self.history:
            buf.write(f"{row['step']},{row['sup_loss']:.6f},{row['con_loss']:.6f},{row['val_acc']:.6f}\n")
        return buf.getvalue()


def _augment_batch(images: np.ndarray, fn, seed: int, step: int, tag: int, spec) -> np.ndarray:
    return np.stack([fn(img, [seed, step, tag, j], spec) for j, img in enumerate(images)])


def _val_stats(model: NodeModel, x: np.ndarray, y: np.ndarray, role: str) -> tuple[float, float]:
    probs = predict_proba(model, x, role)
    p = np.clip(probs[np.arange(len(y)), y], F.PROB_EPS, 1.0)
    acc = float(np.mean(np.argmax(probs, axis=1) == y))
    return float(-np.mean(np.log(p))), acc


def train_node(labeled_x, labeled_y, unlabeled_x=None, config: NodeConfig | None = None,
               val_x=None, val_y=None) -> NodeResult:
    """Mean-teacher training of one binary node.

    Each step draws ``labeled_per_step`` labeled and ``unlabeled_per_step``
    unlabeled images.  The student is trained on cross-entropy over weakly
    augmented labeled images plus a weighted consistency term between the
    teacher on weak views and the student on strong views of all drawn images.
    With a validation set the held-out loss drives early stopping and the
    best state is restored.
    """
    config = config or NodeConfig()
    labeled_x = np.asarray(labeled_x, dtype=np.float64)
    labeled_y = np.asarray(labeled_y, dtype=np.int64)
    if len(labeled_x) == 0:
        raise DataError("train_node needs a nonempty labeled set")
    if len(labeled_x) != len(labeled_y):
        raise DataError("labeled images and labels differ in length")
    if not np.all(np.isin(labeled_y, (0, 1))):
        raise DataError("node labels must be binary")
    unlabeled_x = np.zeros((0,) + labeled_x.shape[1:]) if unlabeled_x is None else np.asarray(unlabeled_x, np.float64)
    has_val = val_x is not None and len(val_x) > 0

    model = NodeModel.create(config.seed, labeled_x.shape[-1], config)
    opt = Adam(model.student.parameters(), config.lr, config.weight_decay)
    q_opt = Adam([model.qcn.angles], config.qcn_lr, 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    spec = config.augment
    n_l, n_u = len(labeled_x), len(unlabeled_x)
    history: list[dict] = []
    best = (np.inf, -1, None)
    bad_evals = 0
    sup_acc, con_acc, seen = 0.0, 0.0, 0
    stopped = False

    for step in range(config.steps):
        li = rng.choice(n_l, size=config.labeled_per_step, replace=n_l < config.labeled_per_step)
        ui = (rng.choice(n_u, size=config.unlabeled_per_step, replace=n_u < config.unlabeled_per_step)
              if n_u else np.zeros(0, dtype=np.int64))
        x_l, y_l = labeled_x[li], labeled_y[li]
        x_all = np.concatenate([x_l, unlabeled_x[ui]])
        lam = consistency_weight(step, config.steps, config.lambda_schedule, config.lambda_max,
                                 config.ramp_fraction)

        weak = _augment_batch(x_all, weak_augment, config.seed, step, 0, spec)
        model.student.train()
        if lam > 0.0:
            strong = _augment_batch(x_all, strong_augment, config.seed, step, 1, spec)
            model.teacher.train()
            with no_grad():
                y_te = node_forward(model, weak, "teacher").data
            out = node_forward(model, np.concatenate([weak[:len(x_l)], strong]), "student")
            sup = F.loss_nll(out[:len(x_l)], y_l)
            con = consistency_loss(y_te, out[len(x_l):])
            loss = sup + con * lam
        else:
            out = node_forward(model, weak[:len(x_l)], "student")
            sup = F.loss_nll(out, y_l)
            con = None
            loss = sup
        opt.zero_grad()
        q_opt.zero_grad()
        loss.backward()
        opt.step()
        q_opt.step()
        ema_update(model)

        sup_acc += sup.item()
        con_acc += con.item() if con is not None else 0.0
        seen += 1
        last = step == config.steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            val_loss, val_acc = (_val_stats(model, val_x, np.asarray(val_y), config.eval_role)
                                 if has_val else (np.nan, np.nan))
            history.append({"step": step, "sup_loss": sup_acc / seen, "con_loss": con_acc / seen,
                            "val_acc": val_acc})
            log.debug("node step %d sup %.4f con %.4f val_loss %.4f val_acc %.3f",
                      step, sup_acc / seen, con_acc / seen, val_loss, val_acc)
            sup_acc, con_acc, seen = 0.0, 0.0, 0
            if has_val:
                if val_loss < best[0]:
                    best = (val_loss, step, model.state_dict())
                    bad_evals = 0
                else:
                    bad_evals += 1
                    if bad_evals >= config.patience:
                        stopped = True
                        break

    best_step = config.steps - 1 if best[2] is None else best[1]
    if best[2] is not None:
        model.load_state_dict(best[2])
    model.student.eval()
    model.teacher.eval()
    return NodeResult(model, history, best_step, stopped)
