"""N-ary and child-sum Tree-LSTM units.

Join nodes carry no input of their own, so every gate is driven by child
hidden states only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..autodiff import Tape, Tensor

ARITY = 4  # alpha0, beta0, beta1, alpha1


@dataclass(frozen=True)
class TreeNodeState:
    h: Tensor
    c: Tensor | None  # None encodes the all-zero cell state of a leaf

    @property
    def is_leaf(self) -> bool:
        return self.c is None


def leaf_state(h: Tensor) -> TreeNodeState:
    return TreeNodeState(h, None)


def nary_unit(children: Sequence[TreeNodeState], U: Tensor, b: Tensor, tape: Tape) -> TreeNodeState:
    """Four ordered children; ``U`` is (4hs, 7hs) laid out as [i | o | u | f0 f1 f2 f3]."""
    if len(children) != ARITY:
        raise ValueError(f"join nodes take exactly {ARITY} children, got {len(children)}")
    hs = children[0].h.shape[1]
    hcat = tape.concat([ch.h for ch in children], axis=1)
    gates = tape.add(tape.matmul(hcat, U), b)
    i = tape.sigmoid(tape.slice(gates, cols=slice(0, hs)))
    o = tape.sigmoid(tape.slice(gates, cols=slice(hs, 2 * hs)))
    u = tape.tanh(tape.slice(gates, cols=slice(2 * hs, 3 * hs)))
    c = tape.mul(i, u)
    for k, ch in enumerate(children):
        if ch.c is None:
            continue  # forget gate times a zero cell
        f = tape.sigmoid(tape.slice(gates, cols=slice((3 + k) * hs, (4 + k) * hs)))
        c = tape.add(c, tape.mul(f, ch.c))
    h = tape.mul(o, tape.tanh(c))
    return TreeNodeState(h, c)


def summed_hidden(children: Sequence[TreeNodeState], tape: Tape) -> Tensor:
    hstack = tape.concat([ch.h for ch in children], axis=0)
    return tape.sum(hstack, axis=0)


def child_sum_unit(
    children: Sequence[TreeNodeState], U_iou: Tensor, b_iou: Tensor, U_f: Tensor, b_f: Tensor, tape: Tape
) -> TreeNodeState:
    """Order-free unit over any number of children: gates see the summed hidden state,
    and each child gets its own forget gate from its own hidden state."""
    if not children:
        raise ValueError("child-sum unit needs at least one child")
    hs = children[0].h.shape[1]
    hstack = tape.concat([ch.h for ch in children], axis=0)
    h_sum = tape.sum(hstack, axis=0)
    iou = tape.add(tape.matmul(h_sum, U_iou), b_iou)
    i = tape.sigmoid(tape.slice(iou, cols=slice(0, hs)))
    o = tape.sigmoid(tape.slice(iou, cols=slice(hs, 2 * hs)))
    u = tape.tanh(tape.slice(iou, cols=slice(2 * hs, 3 * hs)))
    c = tape.mul(i, u)
    inner = [k for k, ch in enumerate(children) if ch.c is not None]
    if inner:
        cstack = tape.concat([children[k].c for k in inner], axis=0)
        hin = hstack if len(inner) == len(children) else tape.concat([children[k].h for k in inner], axis=0)
        f = tape.sigmoid(tape.add(tape.matmul(hin, U_f), b_f))
        c = tape.add(c, tape.sum(tape.mul(f, cstack), axis=0))
    h = tape.mul(o, tape.tanh(c))
    return TreeNodeState(h, c)
