"""Multi-head safe-control model: simplex fusion, training, merging.

The model output is u = sum_k w_k u_k with trainable weights on the
probability simplex (exponential-normalized logits, so nonnegativity and
the unit sum hold by construction).  Because every head satisfies the same
barrier rows up to its own final-level penalty, the convex combination
satisfies a merged barrier row and the fused control inherits the safety
guarantee of the heads.

Two training paths:
  * one-shot: backpropagate the batch loss through every head's QP jointly,
    with a shared cross-connection network producing the lower-order
    penalty from the observation;
  * scalable: train heads independently (each with its own decoupled
    penalty network), reconcile the penalty networks (average or pick one),
    then set the fusion weights from held-out losses, optionally fine-tuning
    the logits with the heads frozen.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import head as hd
from . import qp
from .tasks import Task

CHECKPOINT_VERSION = 1
SIMPLEX_TOL = 1e-12
LOSS_FLOOR = 1e-12


class EmptyDataset(Exception):
    pass


class NonPositiveLoss(Exception):
    pass


class IncompatibleTasks(Exception):
    pass


def simplex_weights(logits: np.ndarray) -> np.ndarray:
    """exp-normalization; the max shift changes nothing but guards overflow."""
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - np.max(logits))
    return e / np.sum(e)


def assert_simplex(w: np.ndarray):
    if np.any(w < 0) or abs(float(np.sum(w)) - 1.0) > SIMPLEX_TOL:
        raise AssertionError(f"fusion weights left the simplex: {w}")


@dataclass
class ActResult:
    u: np.ndarray
    head_controls: np.ndarray        # (h, q); excluded heads hold nan
    weights: np.ndarray              # weights actually used (renormalized)
    flags: list = field(default_factory=list)
    outputs: list = field(default_factory=list)


@dataclass
class AbnetModel:
    task_id: str
    config_hash: str
    heads: list                      # HeadParams
    shared_penalty_net: ad.Mlp
    weight_logits: np.ndarray

    @property
    def h(self) -> int:
        return len(self.heads)

    @property
    def weights(self) -> np.ndarray:
        return simplex_weights(self.weight_logits)

    # -- parameter plumbing -------------------------------------------------

    def parameters(self) -> dict:
        params = {"logits": self.weight_logits}
        params.update(self.shared_penalty_net.param_dict("penalty"))
        for k, head in enumerate(self.heads):
            params.update(head.backbone.param_dict(f"head{k}/backbone"))
        return params

    def set_parameters(self, params: dict):
        self.weight_logits = np.asarray(params["logits"], dtype=np.float64)
        self.shared_penalty_net.set_params("penalty", params)
        for k, head in enumerate(self.heads):
            head.backbone.set_params(f"head{k}/backbone", params)

    # -- forward ------------------------------------------------------------

    def penalty_value(self, z: np.ndarray) -> float:
        raw = self.shared_penalty_net.forward_numpy(z)
        return float(hd.softplus_np(raw[0]))

    def act(self, task: Task, x, z, goal=None) -> ActResult:
        """Inference forward; infeasible heads are dropped and reweighted."""
        z = np.asarray(z, dtype=np.float64)
        p1 = self.penalty_value(z)
        w = self.weights
        assert_simplex(w)
        q = task.sys.q
        head_controls = np.full((self.h, q), np.nan)
        outputs = []
        flags = []
        alive = np.zeros(self.h, dtype=bool)
        for k, head in enumerate(self.heads):
            try:
                out = hd.head_forward(head, x, z, task.cascades, task.sys, p1=p1)
            except qp.Infeasible:
                flags.append(f"head{k}:infeasible")
                outputs.append(None)
                continue
            flags.extend(f"head{k}:{f}" for f in out.flags)
            head_controls[k] = out.u
            outputs.append(out)
            alive[k] = True
        if not np.any(alive):
            raise qp.Infeasible(np.inf)
        if not np.all(alive):
            w = w * alive
            w = w / np.sum(w)
            flags.append("heads_renormalized")
        u = np.zeros(q)
        for k in range(self.h):
            if alive[k]:
                u = u + w[k] * head_controls[k]
        return ActResult(u, head_controls, w, flags, outputs)

    def forward_tape(self, task: Task, tape: ad.Tape, x, z):
        """Training forward: returns (fused Var, head outputs, weight Vars)."""
        z = np.asarray(z, dtype=np.float64)
        z_var = tape.leaf(z)
        raw = self.shared_penalty_net.forward(tape, z_var, prefix="penalty")
        p1_var = ad.softplus(tape, ad.vslice(tape, raw, 0, 1))
        logits_var = tape.leaf(self.weight_logits, param="logits")
        shifted = ad.add_const(tape, logits_var, -float(np.max(self.weight_logits)))
        e = ad.exp(tape, shifted)
        total = ad.vsum(tape, e)
        outputs = []
        fused = None
        for k, head in enumerate(self.heads):
            out = hd.head_forward(head, x, z, task.cascades, task.sys,
                                  tape=tape, p1=p1_var)
            outputs.append(out)
            w_k = ad.div(tape, ad.vslice(tape, e, k, k + 1), total)
            term = ad.smul(tape, w_k, out.u_var)
            fused = term if fused is None else ad.add(tape, fused, term)
        return fused, outputs


# ---------------------------------------------------------------------------
# plain imitation baseline (no barrier layer)


@dataclass
class MlpPolicy:
    task_id: str
    config_hash: str
    net: ad.Mlp

    def act(self, task: Task, x, z, goal=None) -> ActResult:
        u = self.net.forward_numpy(np.asarray(z, dtype=np.float64))
        return ActResult(u, u[None, :], np.array([1.0]))

    def parameters(self) -> dict:
        return self.net.param_dict("net")

    def set_parameters(self, params: dict):
        self.net.set_params("net", params)


# ---------------------------------------------------------------------------
# construction


def build_model(task: Task, h: int, seed: int, masks=None, train_noise=0.0) -> AbnetModel:
    """Fresh model with h heads; per-head backbones get independent seeds."""
    heads = []
    for k in range(h):
        rng = np.random.default_rng([seed, k])
        mask = None if masks is None else np.asarray(masks[k], dtype=np.float64)
        heads.append(hd.HeadParams(ad.Mlp.init(task.backbone_dims(), rng),
                                   name=f"head{k}", observation_mask=mask,
                                   train_noise=train_noise))
    pen_rng = np.random.default_rng([seed, 10_000])
    penalty_net = ad.Mlp.init(task.penalty_dims(), pen_rng)
    return AbnetModel(task.task_id, task.config_hash, heads, penalty_net,
                      np.zeros(h))


def build_baseline(task: Task, seed: int) -> MlpPolicy:
    rng = np.random.default_rng([seed, 77])
    dims = [task.obs_dim, *task.backbone_hidden, task.sys.q]
    return MlpPolicy(task.task_id, task.config_hash, ad.Mlp.init(dims, rng))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    loss_history: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    infeasible_samples: int = 0
    steps: int = 0


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def validation_mse(model, task: Task, dataset, indices=None) -> float:
    """Fused-output MSE on clean observations."""
    idx = np.arange(dataset.n_records) if indices is None else indices
    if len(idx) == 0:
        raise EmptyDataset("no validation records")
    total = 0.0
    for i in idx:
        res = model.act(task, dataset.x[i], dataset.z[i])
        total += ad.mse_loss(res.u, dataset.u[i])
    return total / len(idx)


def train_oneshot(model: AbnetModel, task: Task, dataset, cfg: dict,
                  seed: int = 0, optimizer: ad.AdamState | None = None) -> TrainReport:
    """Joint backprop through all heads, the fusion weights, and the shared
    penalty network.  Infeasible samples are skipped and counted."""
    if dataset.n_records == 0:
        raise EmptyDataset("training dataset is empty")
    epochs = int(cfg.get("epochs", 8))
    batch_size = int(cfg.get("batch_size", 16))
    lam_f = float(cfg.get("lambda_fused", 1.0))
    lam_h = float(cfg.get("lambda_heads", 0.5))
    lam_r = float(cfg.get("lambda_ref", 0.5))
    opt = optimizer or ad.AdamState(lr=float(cfg.get("lr", 1e-3)))
    rng = np.random.default_rng([seed, 1])
    noise_rng = np.random.default_rng([seed, 2])
    report = TrainReport()
    params = model.parameters()
    h = model.h

    for _ in range(epochs):
        epoch_loss, epoch_n = 0.0, 0
        for batch in _epoch_batches(dataset.n_records, batch_size, rng):
            tape = ad.Tape()
            batch_loss = None
            used = 0
            for i in batch:
                z = dataset.z[i]
                label = dataset.u[i]
                try:
                    fused, outs = _sample_graph(model, task, tape, dataset.x[i], z, noise_rng)
                except qp.Infeasible:
                    report.infeasible_samples += 1
                    continue
                loss = ad.scale(tape, lam_f, ad.mse(tape, fused, label))
                for out in outs:
                    loss = ad.add(tape, loss, ad.scale(tape, lam_h / h, ad.mse(tape, out.u_var, label)))
                    loss = ad.add(tape, loss, ad.scale(tape, lam_r / h, ad.mse(tape, out.u_ref_var, label)))
                batch_loss = loss if batch_loss is None else ad.add(tape, batch_loss, loss)
                used += 1
            if used == 0:
                continue
            mean_loss = ad.scale(tape, 1.0 / used, batch_loss)
            tape.backward(mean_loss)
            grads = {name: tape.grad_for(name, like=p) for name, p in params.items()}
            params = ad.adam_step(params, grads, opt)
            model.set_parameters(params)
            assert_simplex(model.weights)
            report.steps += 1
            epoch_loss += float(mean_loss.value) * used
            epoch_n += used
        report.loss_history.append(epoch_loss / max(epoch_n, 1))
    return report


def _sample_graph(model, task, tape, x, z, noise_rng):
    """One sample's graph; per-head training noise decorrelates the heads."""
    if any(head.train_noise for head in model.heads):
        # heads see independently jittered observations during training
        outs = []
        fused = None
        z_var_cache = {}
        p1_var = _penalty_var(model, tape, z)
        logits_var = tape.leaf(model.weight_logits, param="logits")
        shifted = ad.add_const(tape, logits_var, -float(np.max(model.weight_logits)))
        e = ad.exp(tape, shifted)
        total = ad.vsum(tape, e)
        for k, head in enumerate(model.heads):
            z_k = z
            if head.train_noise:
                z_k = z + noise_rng.uniform(-head.train_noise, head.train_noise,
                                            size=z.shape) * np.abs(z)
            out = hd.head_forward(head, x, z_k, task.cascades, task.sys,
                                  tape=tape, p1=p1_var)
            outs.append(out)
            w_k = ad.div(tape, ad.vslice(tape, e, k, k + 1), total)
            term = ad.smul(tape, w_k, out.u_var)
            fused = term if fused is None else ad.add(tape, fused, term)
        return fused, outs
    return model.forward_tape(task, tape, x, z)


def _penalty_var(model, tape, z):
    z_var = tape.leaf(np.asarray(z, dtype=np.float64))
    raw = model.shared_penalty_net.forward(tape, z_var, prefix="penalty")
    return ad.softplus(tape, ad.vslice(tape, raw, 0, 1))


def fuse_by_loss(losses) -> np.ndarray:
    """Weights proportional to inverse held-out loss."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses <= 0.0):
        raise NonPositiveLoss(f"losses must be positive, got {losses}")
    inv = 1.0 / np.maximum(losses, LOSS_FLOOR)
    return inv / np.sum(inv)


def train_scalable(task: Task, dataset, cfg: dict, h: int, seed: int = 0,
                   workers: int = 1) -> tuple:
    """Independent-head training, penalty reconciliation, loss-based fusion."""
    if h < 1:
        raise ValueError("need at least one head")
    val_idx, train_idx = dataset.split(float(cfg.get("val_fraction", 0.1)))
    train_ds = dataset.subset(train_idx)
    val_ds = dataset.subset(val_idx)
    head_cfg = dict(cfg)
    head_cfg["epochs"] = int(cfg.get("scalable_epochs", cfg.get("epochs", 4)))
    noise = float(cfg.get("head_train_noise", 0.0))

    # tasks hold constraint closures and cannot cross process boundaries;
    # workers rebuild them from the resolved config instead
    jobs = [(task.config, train_ds, head_cfg, seed, k, noise) for k in range(h)]
    if workers > 1 and h > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=min(workers, h)) as pool:
            results = list(pool.map(_train_single_head, jobs))
    else:
        results = [_train_single_head(job) for job in jobs]

    heads, penalty_nets, reports = [], [], []
    for k, (sub, rep) in enumerate(results):
        if sub is None:
            import logging
            logging.getLogger(__name__).warning("head %d failed to train; excluded", k)
            continue
        sub.heads[0].name = f"head{len(heads)}"
        heads.append(sub.heads[0])
        penalty_nets.append(sub.shared_penalty_net)
        reports.append(rep)
    if not heads:
        raise EmptyDataset("all heads failed to train")

    merge_mode = cfg.get("penalty_merge", "average")
    if merge_mode == "average":
        shared = _average_mlps(penalty_nets)
    elif merge_mode == "pick":
        shared = penalty_nets[int(cfg.get("pick_index", 0))]
    else:
        raise ValueError(f"penalty_merge must be 'average' or 'pick', got {merge_mode!r}")

    model = AbnetModel(task.task_id, task.config_hash, heads, shared,
                       np.zeros(len(heads)))
    losses = [_head_val_loss(model, task, val_ds, k) for k in range(model.h)]
    w = fuse_by_loss(losses)
    model.weight_logits = np.log(w)
    assert_simplex(model.weights)

    extra = int(cfg.get("extra_iters", 0))
    if extra > 0 and val_ds.n_records:
        _tune_logits(model, task, val_ds, extra, float(cfg.get("lr", 1e-3)), seed)
    report = TrainReport(
        loss_history=[r.loss_history for r in reports],
        infeasible_samples=sum(r.infeasible_samples for r in reports),
        steps=sum(r.steps for r in reports),
    )
    report.head_losses = losses
    return model, report


def _train_single_head(job):
    task_config, train_ds, head_cfg, seed, k, noise = job
    from .tasks import build_task
    task = build_task(task_config)
    sub = build_model(task, 1, seed=int(np.random.default_rng([seed, k, 3]).integers(2 ** 31)),
                      train_noise=noise)
    sub.heads[0].name = "head0"
    try:
        rep = train_oneshot(sub, task, train_ds, head_cfg, seed=seed * 1000 + k)
    except qp.QpError:
        return None, None
    return sub, rep


def _head_val_loss(model, task, val_ds, k) -> float:
    total = 0.0
    n = max(val_ds.n_records, 1)
    for i in range(val_ds.n_records):
        p1 = model.penalty_value(val_ds.z[i])
        try:
            out = hd.head_forward(model.heads[k], val_ds.x[i], val_ds.z[i],
                                  task.cascades, task.sys, p1=p1)
            total += ad.mse_loss(out.u, val_ds.u[i])
        except qp.Infeasible:
            total += 1.0  # heavily penalize heads that go infeasible
    return max(total / n, LOSS_FLOOR)


def _tune_logits(model, task, val_ds, iters, lr, seed):
    """Fine-tune only the fusion weights with every head frozen."""
    opt = ad.AdamState(lr=lr)
    rng = np.random.default_rng([seed, 9])
    params = {"logits": model.weight_logits}
    for _ in range(iters):
        i = int(rng.integers(val_ds.n_records))
        tape = ad.Tape()
        try:
            fused, _ = model.forward_tape(task, tape, val_ds.x[i], val_ds.z[i])
        except qp.Infeasible:
            continue
        loss = ad.mse(tape, fused, val_ds.u[i])
        tape.backward(loss)
        grads = {"logits": tape.grad_for("logits", like=params["logits"])}
        params = ad.adam_step(params, grads, opt)
        model.weight_logits = params["logits"]
        assert_simplex(model.weights)


def _average_mlps(nets) -> ad.Mlp:
    out = copy.deepcopy(nets[0])
    for i in range(len(out.weights)):
        out.weights[i] = np.mean([n.weights[i] for n in nets], axis=0)
        out.biases[i] = np.mean([n.biases[i] for n in nets], axis=0)
    return out


def train_baseline(policy: MlpPolicy, task: Task, dataset, cfg: dict, seed: int = 0) -> TrainReport:
    """Plain MSE imitation for the unconstrained baseline."""
    if dataset.n_records == 0:
        raise EmptyDataset("training dataset is empty")
    epochs = int(cfg.get("epochs", 8))
    batch_size = int(cfg.get("batch_size", 16))
    opt = ad.AdamState(lr=float(cfg.get("lr", 1e-3)))
    rng = np.random.default_rng([seed, 4])
    params = policy.parameters()
    report = TrainReport()
    for _ in range(epochs):
        epoch_loss, epoch_n = 0.0, 0
        for batch in _epoch_batches(dataset.n_records, batch_size, rng):
            tape = ad.Tape()
            batch_loss = None
            for i in batch:
                out = policy.net.forward(tape, tape.leaf(dataset.z[i]), prefix="net")
                loss = ad.mse(tape, out, dataset.u[i])
                batch_loss = loss if batch_loss is None else ad.add(tape, batch_loss, loss)
            mean_loss = ad.scale(tape, 1.0 / len(batch), batch_loss)
            tape.backward(mean_loss)
            grads = {name: tape.grad_for(name, like=p) for name, p in params.items()}
            params = ad.adam_step(params, grads, opt)
            policy.set_parameters(params)
            report.steps += 1
            epoch_loss += float(mean_loss.value) * len(batch)
            epoch_n += len(batch)
        report.loss_history.append(epoch_loss / max(epoch_n, 1))
    return report


# ---------------------------------------------------------------------------
# merging


def merge(model_a: AbnetModel, model_b: AbnetModel, mix=(0.5, 0.5),
          penalty_merge: str = "first") -> AbnetModel:
    """Convex combination of two trained models into one wider model."""
    if model_a.task_id != model_b.task_id or model_a.config_hash != model_b.config_hash:
        raise IncompatibleTasks(
            f"{model_a.task_id}/{model_a.config_hash} vs {model_b.task_id}/{model_b.config_hash}")
    wa, wb = float(mix[0]), float(mix[1])
    if wa < 0 or wb < 0 or abs(wa + wb - 1.0) > SIMPLEX_TOL:
        raise ValueError("mix must lie on the simplex")
    heads = copy.deepcopy(model_a.heads) + copy.deepcopy(model_b.heads)
    for k, head in enumerate(heads):
        head.name = f"head{k}"
    weights = np.concatenate([wa * model_a.weights, wb * model_b.weights])
    weights = np.maximum(weights, 1e-300)
    if penalty_merge == "average":
        pen = _average_mlps([model_a.shared_penalty_net, model_b.shared_penalty_net])
    else:
        pen = copy.deepcopy(model_a.shared_penalty_net)
    merged = AbnetModel(model_a.task_id, model_a.config_hash, heads, pen,
                        np.log(weights))
    assert_simplex(merged.weights)
    return merged


# ---------------------------------------------------------------------------
# checkpoints


def _arr_to_json(a: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _arr_from_json(d) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def _mlp_to_json(net: ad.Mlp):
    return {
        "layer_dims": list(net.layer_dims),
        "weights": [_arr_to_json(w) for w in net.weights],
        "biases": [_arr_to_json(b) for b in net.biases],
    }


def _mlp_from_json(d) -> ad.Mlp:
    return ad.Mlp(list(d["layer_dims"]),
                  [_arr_from_json(w) for w in d["weights"]],
                  [_arr_from_json(b) for b in d["biases"]])


def save_checkpoint(model, path, task_config: dict, optimizer: ad.AdamState | None = None,
                    extra: dict | None = None):
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "task": model.task_id,
        "config_hash": model.config_hash,
        "task_config": task_config,
    }
    if isinstance(model, AbnetModel):
        doc["kind"] = "abnet"
        doc["heads"] = [{
            "backbone": _mlp_to_json(head.backbone),
            "mask": None if head.observation_mask is None else _arr_to_json(head.observation_mask),
            "train_noise": head.train_noise,
        } for head in model.heads]
        doc["shared_penalty_net"] = _mlp_to_json(model.shared_penalty_net)
        doc["weight_logits"] = _arr_to_json(model.weight_logits)
    elif isinstance(model, MlpPolicy):
        doc["kind"] = "mlp"
        doc["net"] = _mlp_to_json(model.net)
    else:
        raise TypeError(f"cannot checkpoint {type(model)!r}")
    if optimizer is not None:
        doc["optimizer"] = {
            "step": optimizer.step,
            "lr": optimizer.lr,
            "m": {k: _arr_to_json(v) for k, v in optimizer.m.items()},
            "v": {k: _arr_to_json(v) for k, v in optimizer.v.items()},
        }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    return path


def load_checkpoint(path, expected_hash: str | None = None):
    """Returns (model, task_config, optimizer-or-None)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleTasks(f"unsupported checkpoint version {doc.get('format_version')}")
    if expected_hash is not None and doc["config_hash"] != expected_hash:
        raise IncompatibleTasks(
            f"checkpoint was trained for config {doc['config_hash']}, expected {expected_hash}")
    if doc["kind"] == "abnet":
        heads = []
        for k, hj in enumerate(doc["heads"]):
            mask = None if hj["mask"] is None else _arr_from_json(hj["mask"])
            heads.append(hd.HeadParams(_mlp_from_json(hj["backbone"]), name=f"head{k}",
                                       observation_mask=mask,
                                       train_noise=float(hj.get("train_noise", 0.0))))
        model = AbnetModel(doc["task"], doc["config_hash"], heads,
                           _mlp_from_json(doc["shared_penalty_net"]),
                           _arr_from_json(doc["weight_logits"]))
    elif doc["kind"] == "mlp":
        model = MlpPolicy(doc["task"], doc["config_hash"], _mlp_from_json(doc["net"]))
    else:
        raise IncompatibleTasks(f"unknown checkpoint kind {doc['kind']!r}")
    optimizer = None
    if "optimizer" in doc:
        oj = doc["optimizer"]
        optimizer = ad.AdamState(lr=oj["lr"], step=oj["step"],
                                 m={k: _arr_from_json(v) for k, v in oj["m"].items()},
                                 v={k: _arr_from_json(v) for k, v in oj["v"].items()})
    return model, doc["task_config"], optimizer
