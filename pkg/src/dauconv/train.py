"""Training and evaluation loops.

All randomness (shuffling, augmentation) comes from counter-based streams
keyed by (seed, purpose, epoch-or-step), so a run is a pure function of its
config and resuming from a checkpoint continues bit-identically: no generator
state needs to survive beyond the seed and the step counter.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .checkpoint import save_checkpoint
from .network import init_rng
from .optim import sgd_step

SHUFFLE_STREAM = 1 << 32
AUGMENT_STREAM = 2 << 32


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the last good checkpoint is left in place."""


def evaluate(network, dataset, batch_size=256):
    """Top-1 accuracy and mean loss in eval mode; mutates nothing."""
    n = len(dataset)
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = network.forward(x, train=False)
        loss, _, probs = nn.softmax_xent(logits, y)
        loss_sum += loss * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    return correct / n, loss_sum / n


def train(network, bundle, tcfg, *, augment_mirror=False, eval_interval=None,
          start_step=0, groups=None, history=None, checkpoint_path=None,
          checkpoint_interval=0):
    """Run tcfg.total_iterations SGD steps (resuming at start_step when given).

    History rows are appended at every eval_interval steps and at the end:
    step, epoch, effective base lr, mean train loss and accuracy since the
    previous row, and test accuracy. Returns (history, groups).
    """
    seed = network.spec.seed
    n = len(bundle.train)
    if n == 0:
        raise ValueError("training split is empty")
    batch = tcfg.batch_size
    steps_per_epoch = (n + batch - 1) // batch
    if groups is None:
        groups = network.param_groups(tcfg.mu_lr_multiplier)
    if history is None:
        history = []
    if eval_interval is None:
        eval_interval = steps_per_epoch

    perm = None
    perm_epoch = -1
    window_loss, window_acc, window_count = 0.0, 0.0, 0

    from .optim import lr_schedule  # local import keeps module load order simple

    for step in range(start_step, tcfg.total_iterations):
        epoch = step // steps_per_epoch
        pos = step % steps_per_epoch
        if epoch != perm_epoch:
            perm = init_rng(seed, SHUFFLE_STREAM + epoch).permutation(n)
            perm_epoch = epoch
        idx = perm[pos * batch:(pos + 1) * batch]
        x = bundle.train.images[idx]
        y = bundle.train.labels[idx]
        if augment_mirror:
            flip = init_rng(seed, AUGMENT_STREAM + step).random(len(idx)) < 0.5
            if flip.any():
                x = x.copy()
                x[flip] = x[flip][..., ::-1]

        loss, acc = network.loss_and_grad(x, y, train=True)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss} at step {step}; last checkpoint retained")
        grads = network.grads_for(groups)
        network.sigma_clamp_events += sgd_step(groups, grads, tcfg, step)

        window_loss += loss
        window_acc += acc
        window_count += 1

        done = step + 1 == tcfg.total_iterations
        if done or (step + 1) % eval_interval == 0:
            test_acc, _ = evaluate(network, bundle.test)
            history.append({
                "step": step + 1,
                "epoch": epoch,
                "lr": tcfg.base_lr * lr_schedule(tcfg, step),
                "loss": window_loss / window_count,
                "train_acc": window_acc / window_count,
                "test_acc": test_acc,
            })
            window_loss, window_acc, window_count = 0.0, 0.0, 0
        if checkpoint_path and (done or (
                checkpoint_interval and (step + 1) % checkpoint_interval == 0)):
            save_checkpoint(checkpoint_path, network, groups, step=step + 1)
    return history, groups


HISTORY_COLUMNS = ("step", "epoch", "lr", "loss", "train_acc", "test_acc")


def format_float(x):
    return f"{x:.9g}"


def write_history(rows, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in HISTORY_COLUMNS:
                v = row[col]
                cells.append(str(v) if isinstance(v, (int, np.integer))
                             else format_float(v))
            fh.write(",".join(cells) + "\n")
