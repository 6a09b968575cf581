#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Scalar recurrence w <- (1 - lr*lam) w for the quadratic bowl, with the
window-5 rule agent acting every `cadence` steps."""
import json

LAM, W0, LR0, STEPS, CADENCE = 500.0, 1.0, 5e-3, 200, 10


def loss(w):
    return 0.5 * LAM * w * w


def decide(losses):
    if len(losses) < 2:
        return "keep"
    win = losses[-5:]
    if win[-1] > win[0]:
        return "halve"
    d = [b - a for a, b in zip(win, win[1:])]
    changes = sum(1 for a, b in zip(d, d[1:]) if (a > 0 > b) or (a < 0 < b))
    if changes >= 2 and sum(abs(x) for x in d) / len(d) > 0.1 * sum(win) / len(win):
        return "halve"
    if all(x < 0 for x in d) and win[0] > 0 and (win[0] - win[-1]) / win[0] < 0.01:
        return "double"
    return "keep"


def run(agent):
    w, lr, losses, lrs, pending = W0, LR0, [], [], None
    for step in range(STEPS):
        if pending is not None:
            lr, pending = pending, None
        losses.append(loss(w))
        lrs.append(lr)
        w = w - lr * (LAM * w)
        if agent and (step + 1) % CADENCE == 0:
            a = decide(losses)
            if a == "halve":
                pending = lr / 2
            elif a == "double":
                pending = lr * 2
    return {"initial_loss": loss(W0), "final_loss": loss(w), "final_lr": lrs[-1] if pending is None else pending,
            "last_metric_loss": losses[-1]}


if __name__ == "__main__":
    print(json.dumps({"static": run(False), "agent": run(True)}, indent=1))
