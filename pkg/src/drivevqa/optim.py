"""AdamW with parameter groups and a per-epoch exponential decay schedule.

Decoupled weight decay: the decay term scales the parameter directly and is
not folded into the adaptive moments. Groups carry their own learning rate
so the language phase can drive the sequence model and the vision backbone
at different speeds.
"""

import numpy as np


class AdamW:
    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        """groups: iterable of dicts {params, lr, weight_decay}."""
        self.betas = betas
        self.eps = eps
        self.groups = []
        seen = set()
        for g in groups:
            params = list(g["params"])
            for p in params:
                if id(p) in seen:
                    raise ValueError("parameter appears in more than one group")
                seen.add(id(p))
                if not p.requires_grad:
                    raise ValueError("optimizer group contains a frozen tensor")
            self.groups.append({
                "params": params,
                "lr": float(g["lr"]),
                "weight_decay": float(g.get("weight_decay", 0.0)),
                "m": [np.zeros_like(p.data) for p in params],
                "v": [np.zeros_like(p.data) for p in params],
            })
        self.t = 0

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for p, m, v in zip(g["params"], g["m"], g["v"]):
                if p.grad is None:
                    continue
                grad = p.grad
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * np.square(grad)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                if wd != 0.0:
                    update = update + wd * p.data
                p.data -= lr * update

    # -- persistence ---------------------------------------------------------
    def state_tensors(self):
        """Flat {name: array} of every moment buffer plus the step counter."""
        out = {"t": np.array(self.t, dtype=np.int64)}
        for gi, g in enumerate(self.groups):
            out[f"group{gi}.lr"] = np.array(g["lr"], dtype=np.float64)
            for pi, (m, v) in enumerate(zip(g["m"], g["v"])):
                out[f"group{gi}.m{pi}"] = m
                out[f"group{gi}.v{pi}"] = v
        return out

    def load_state_tensors(self, state):
        self.t = int(state["t"])
        for gi, g in enumerate(self.groups):
            g["lr"] = float(state[f"group{gi}.lr"])
            for pi in range(len(g["params"])):
                m, v = state[f"group{gi}.m{pi}"], state[f"group{gi}.v{pi}"]
                if m.shape != g["m"][pi].shape:
                    raise ValueError(f"moment shape mismatch for group {gi} "
                                     f"param {pi}")
                g["m"][pi] = m.astype(g["m"][pi].dtype, copy=True)
                g["v"][pi] = v.astype(g["v"][pi].dtype, copy=True)


class ExponentialDecay:
    """Multiplies every group learning rate by gamma on each call."""

    def __init__(self, optimizer, gamma):
        self.optimizer = optimizer
        self.gamma = float(gamma)

    def step(self):
        for g in self.optimizer.groups:
            g["lr"] *= self.gamma

    def lrs(self):
        return [g["lr"] for g in self.optimizer.groups]
