"""Tab-separated text format for boosted models.

Layout::

    spidefect-gbdt<TAB>1
    base_score<TAB><float>
    learning_rate<TAB><float>
    config<TAB><key><TAB><value>        (one line per TrainConfig field)
    features<TAB><count>
    feature<TAB><index><TAB><name>
    trees<TAB><count>
    tree<TAB><index><TAB><node count>
    split<TAB><feature index><TAB><feature name><TAB><threshold><TAB><gain>
    leaf<TAB><weight>

Nodes are listed in preorder (node, left subtree, right subtree). Floats use
``repr`` so a save/load cycle is exact.
"""
from __future__ import annotations

from dataclasses import fields

from ..errors import SpiDefectError
from .booster import BoostedModel, Leaf, Split, TrainConfig, Tree

MAGIC = "spidefect-gbdt"
VERSION = 1


class ModelFormatError(SpiDefectError):
    pass


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "none" if value is None else str(value)


def dumps(model: BoostedModel) -> str:
    out = [f"{MAGIC}\t{VERSION}", f"base_score\t{model.base_score!r}",
           f"learning_rate\t{model.learning_rate!r}"]
    for f in fields(TrainConfig):
        out.append(f"config\t{f.name}\t{_fmt(getattr(model.config, f.name))}")
    out.append(f"features\t{len(model.feature_names)}")
    out += [f"feature\t{i}\t{name}" for i, name in enumerate(model.feature_names)]
    out.append(f"trees\t{len(model.trees)}")
    for t, tree in enumerate(model.trees):
        out.append(f"tree\t{t}\t{tree.n_nodes}")
        stack = [tree.root()]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(f"leaf\t{node.weight!r}")
            else:
                name = model.feature_names[node.feature_index]
                out.append(f"split\t{node.feature_index}\t{name}\t{node.threshold!r}\t{node.gain!r}")
                stack.append(node.right)
                stack.append(node.left)
    return "\n".join(out) + "\n"


def _parse_config(items: dict) -> TrainConfig:
    kwargs = {}
    for f in fields(TrainConfig):
        if f.name not in items:
            continue
        raw = items[f.name]
        if raw == "none":
            kwargs[f.name] = None
        elif f.name in ("max_depth", "num_rounds", "feature_top_k", "histogram_bins", "seed"):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    return TrainConfig(**kwargs)


def loads(text: str) -> BoostedModel:
    lines = text.splitlines()
    pos = 0

    def take(tag):
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"unexpected end of model text, expected {tag!r}")
        parts = lines[pos].split("\t")
        if parts[0] != tag:
            raise ModelFormatError(f"line {pos + 1}: expected {tag!r}, found {parts[0]!r}")
        pos += 1
        return parts[1:]

    head = take(MAGIC)
    if int(head[0]) != VERSION:
        raise ModelFormatError(f"unsupported model version {head[0]}")
    base = float(take("base_score")[0])
    lr = float(take("learning_rate")[0])
    cfg_items = {}
    while pos < len(lines) and lines[pos].startswith("config\t"):
        key, value = take("config")
        cfg_items[key] = value
    n_feat = int(take("features")[0])
    names = []
    for i in range(n_feat):
        idx, name = take("feature")
        if int(idx) != i:
            raise ModelFormatError(f"feature index {idx} out of order")
        names.append(name)
    n_trees = int(take("trees")[0])
    trees = []

    def node():
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("unexpected end of model text inside a tree")
        parts = lines[pos].split("\t")
        pos += 1
        if parts[0] == "leaf":
            return Leaf(float(parts[1]))
        if parts[0] != "split":
            raise ModelFormatError(f"line {pos}: expected split or leaf")
        f = int(parts[1])
        if names[f] != parts[2]:
            raise ModelFormatError(f"line {pos}: feature {f} is {names[f]!r}, not {parts[2]!r}")
        thr, gain = float(parts[3]), float(parts[4])
        left = node()
        right = node()
        return Split(f, thr, left, right, gain)

    for t in range(n_trees):
        _, count = take("tree")
        tree = Tree.from_root(node())
        if tree.n_nodes != int(count):
            raise ModelFormatError(f"tree {t}: expected {count} nodes, parsed {tree.n_nodes}")
        trees.append(tree)
    return BoostedModel(trees, base, lr, tuple(names), _parse_config(cfg_items))


def save_model(model: BoostedModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(model))


def load_model(path) -> BoostedModel:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
