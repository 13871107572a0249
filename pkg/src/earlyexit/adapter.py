"""Structural probing of model manifests.

A manifest is a serialized description of a model's attribute tree: every
node has a kind (module, list, linear, embedding, norm), optional shape
metadata, and named children. The probe resolves the five components the
runtime needs — decoder layer list, final norm, LM head, input embedding,
and hidden dimension — by trying known attribute paths first and falling
back to structural heuristics, so that differently shaped model families
work without per-family glue code.

Custom resolvers registered via :func:`register_adapter` are consulted
before the built-in search and may decline a manifest by returning None.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

NODE_KINDS = ("module", "list", "linear", "embedding", "norm")

# Known attribute paths, tried in priority order. The layer list is the
# published set; the norm/head/embedding sets are this repo's documented
# choices covering the same model families.
LAYER_PATHS = (
    "model.layers",
    "transformer.h",
    "transformer.layers",
    "gpt_neox.layers",
    "model.decoder.layers",
)
NORM_PATHS = (
    "model.norm",
    "transformer.ln_f",
    "transformer.final_layernorm",
    "gpt_neox.final_layer_norm",
    "model.decoder.final_layer_norm",
)
HEAD_PATHS = (
    "lm_head",
    "embed_out",
)
EMBEDDING_PATHS = (
    "model.embed_tokens",
    "transformer.wte",
    "transformer.word_embeddings",
    "gpt_neox.embed_in",
    "model.decoder.embed_tokens",
)

NAMED_PATH = "named-path"
FALLBACK_HEURISTIC = "fallback-heuristic"
REGISTERED = "registered"

_COMPONENTS = ("layers", "final_norm", "lm_head", "embedding", "hidden_dim")


class ManifestError(ValueError):
    """Raised when manifest text does not follow the documented grammar."""


class ProbeError(RuntimeError):
    """Probe failure, always naming the component that could not be resolved."""

    def __init__(self, component: str, message: str):
        super().__init__(f"{component}: {message}")
        self.component = component


@dataclass
class ManifestNode:
    name: str
    kind: str
    rows: Optional[int] = None
    cols: Optional[int] = None
    children: dict = field(default_factory=dict)

    def child(self, name: str) -> Optional["ManifestNode"]:
        return self.children.get(name)


@dataclass
class ModelManifest:
    root: ManifestNode
    config: dict

    def lookup(self, path: str) -> Optional[ManifestNode]:
        """Resolve a dot-separated attribute path, or None if absent."""
        node = self.root
        for part in path.split("."):
            node = node.children.get(part)
            if node is None:
                return None
        return node

    def iter_nodes(self) -> Iterator[tuple]:
        """Yield (path, node) pairs in document order, root excluded."""
        stack = [("", self.root)]
        while stack:
            prefix, node = stack.pop(0)
            for name, child in node.children.items():
                path = f"{prefix}.{name}" if prefix else name
                yield path, child
                stack.append((path, child))


@dataclass
class AdapterMap:
    layers: str
    final_norm: str
    lm_head: str
    embedding: str
    hidden_dim: int
    layer_count: int
    resolution: dict  # component name -> resolution method

    def as_lines(self) -> list:
        lines = []
        for component in _COMPONENTS:
            value = self.hidden_dim if component == "hidden_dim" else getattr(self, component)
            lines.append(f"{component}={value}")
            lines.append(f"{component}.method={self.resolution[component]}")
        lines.append(f"layer_count={self.layer_count}")
        return lines


# ---------------------------------------------------------------------------
# Manifest grammar
# ---------------------------------------------------------------------------
#
#   config hidden_size=4096          top-level config entries
#   model: module                    name ":" kind [key=value ...]
#     embed_tokens: embedding rows=32000 cols=4096
#     layers: list count=32
#       0: module
#         input_layernorm: norm
#   lm_head: linear rows=32000 cols=4096
#
# Two-space indentation encodes nesting. Blank lines and lines starting
# with "#" are ignored. Only module and list nodes may have children; a
# list's optional count attribute must match its child count.

_NODE_ATTRS = {"rows", "cols", "count"}


def _parse_attrs(parts, lineno: int) -> dict:
    attrs = {}
    for part in parts:
        key, sep, value = part.partition("=")
        if not sep or key not in _NODE_ATTRS:
            raise ManifestError(f"line {lineno}: bad attribute {part!r}")
        try:
            attrs[key] = int(value)
        except ValueError:
            raise ManifestError(f"line {lineno}: attribute {key} needs an integer, got {value!r}")
    return attrs


def parse_manifest(text: str) -> ModelManifest:
    root = ManifestNode(name="", kind="module")
    config = {}
    # stack[level] is the node new children at that depth attach to
    stack = [root]
    counts = []  # (node, declared_count, lineno) to verify after parsing

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line or line.lstrip().startswith("#"):
            continue
        if "\t" in line:
            raise ManifestError(f"line {lineno}: tabs are not allowed, indent with spaces")
        stripped = line.lstrip(" ")
        indent = len(line) - len(stripped)
        if indent % 2 != 0:
            raise ManifestError(f"line {lineno}: indentation must be a multiple of two spaces")
        level = indent // 2

        if stripped.startswith("config "):
            if level != 0:
                raise ManifestError(f"line {lineno}: config entries belong at top level")
            key, sep, value = stripped[len("config "):].strip().partition("=")
            if not sep:
                raise ManifestError(f"line {lineno}: config entry needs key=value")
            try:
                config[key.strip()] = int(value.strip())
            except ValueError:
                raise ManifestError(f"line {lineno}: config {key.strip()!r} needs an integer")
            continue

        name, sep, rest = stripped.partition(":")
        name = name.strip()
        if not sep or not name:
            raise ManifestError(f"line {lineno}: expected 'name: kind', got {stripped!r}")
        if "." in name or " " in name:
            raise ManifestError(f"line {lineno}: node name {name!r} may not contain dots or spaces")
        parts = rest.split()
        if not parts:
            raise ManifestError(f"line {lineno}: node {name!r} is missing a kind")
        kind = parts[0]
        if kind not in NODE_KINDS:
            raise ManifestError(f"line {lineno}: unknown node kind {kind!r}")
        attrs = _parse_attrs(parts[1:], lineno)
        if "count" in attrs and kind != "list":
            raise ManifestError(f"line {lineno}: count only applies to list nodes")
        if ("rows" in attrs or "cols" in attrs) and kind not in ("linear", "embedding"):
            raise ManifestError(f"line {lineno}: shape only applies to linear/embedding nodes")

        if level >= len(stack):
            raise ManifestError(f"line {lineno}: indentation jumps more than one level")
        parent = stack[level]
        if parent.kind not in ("module", "list"):
            raise ManifestError(
                f"line {lineno}: {parent.kind} node {parent.name!r} cannot have children")
        if name in parent.children:
            raise ManifestError(f"line {lineno}: duplicate child {name!r} under {parent.name!r}")

        node = ManifestNode(name=name, kind=kind,
                            rows=attrs.get("rows"), cols=attrs.get("cols"))
        parent.children[name] = node
        del stack[level + 1:]
        stack.append(node)
        if "count" in attrs:
            counts.append((node, attrs["count"], lineno))

    for node, declared, lineno in counts:
        if len(node.children) != declared:
            raise ManifestError(
                f"line {lineno}: list {node.name!r} declares count={declared} "
                f"but has {len(node.children)} children")
    return ModelManifest(root=root, config=config)


def load_manifest(path) -> ModelManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_manifest(fh.read())


# ---------------------------------------------------------------------------
# Custom adapter registry
# ---------------------------------------------------------------------------

_registry_lock = threading.Lock()
_registry: dict = {}  # name -> resolver, in registration order


def register_adapter(name: str, resolver: Callable) -> None:
    """Register a custom resolver consulted before the built-in path search.

    The resolver receives the manifest and returns an AdapterMap, or None to
    decline. Names must be unique; registration is serialized.
    """
    with _registry_lock:
        if name in _registry:
            raise ValueError(f"adapter {name!r} is already registered")
        _registry[name] = resolver


def unregister_adapter(name: str) -> None:
    with _registry_lock:
        if name not in _registry:
            raise ValueError(f"adapter {name!r} is not registered")
        del _registry[name]


def registered_adapters() -> tuple:
    with _registry_lock:
        return tuple(_registry)


# ---------------------------------------------------------------------------
# Probe
# ---------------------------------------------------------------------------


def _first_named(manifest: ModelManifest, paths, kind) -> Optional[str]:
    for path in paths:
        node = manifest.lookup(path)
        if node is not None and node.kind == kind:
            return path
    return None


def _resolve_layers(manifest: ModelManifest):
    path = _first_named(manifest, LAYER_PATHS, "list")
    if path is not None:
        return path, NAMED_PATH
    lists = [(p, n) for p, n in manifest.iter_nodes() if n.kind == "list"]
    if not lists:
        raise ProbeError("layers", "no named path matched and the manifest has no module lists")
    lists.sort(key=lambda item: len(item[1].children), reverse=True)
    if len(lists) > 1 and len(lists[0][1].children) == len(lists[1][1].children):
        raise ProbeError(
            "layers",
            f"ambiguous fallback: module lists {lists[0][0]!r} and {lists[1][0]!r} "
            f"are the same size ({len(lists[0][1].children)})")
    return lists[0][0], FALLBACK_HEURISTIC


def _resolve_final_norm(manifest: ModelManifest, layers_path: str):
    path = _first_named(manifest, NORM_PATHS, "norm")
    if path is not None:
        return path, NAMED_PATH
    # Sibling heuristic: a norm living next to the layer list is the final one.
    parent_path, _, _ = layers_path.rpartition(".")
    parent = manifest.lookup(parent_path) if parent_path else manifest.root
    siblings = [name for name, node in parent.children.items() if node.kind == "norm"]
    if not siblings:
        raise ProbeError("final_norm",
                         "no named path matched and no norm sits beside the layer list")
    if len(siblings) > 1:
        raise ProbeError("final_norm",
                         f"ambiguous fallback: several norms beside the layer list ({siblings})")
    return (f"{parent_path}.{siblings[0]}" if parent_path else siblings[0]), FALLBACK_HEURISTIC


def _shape_match(manifest: ModelManifest, component: str, kind: str,
                 vocab_size: Optional[int], layers_path: str):
    if vocab_size is None:
        raise ProbeError(component,
                         "no named path matched and config lacks vocab_size for shape matching")
    hits = [(p, n) for p, n in manifest.iter_nodes()
            if n.kind == kind and n.rows == vocab_size]
    if not hits:
        raise ProbeError(component, f"no {kind} node has {vocab_size} rows")
    inside_prefix = layers_path + "."
    outside = [p for p, _ in hits if not p.startswith(inside_prefix)]
    candidates = outside if outside else [p for p, _ in hits]
    if len(candidates) > 1:
        raise ProbeError(component,
                         f"ambiguous shape match: {candidates} all have {vocab_size} rows")
    return candidates[0], FALLBACK_HEURISTIC


def probe(manifest: ModelManifest) -> AdapterMap:
    """Resolve all five components of a manifest or fail naming the first missing one."""
    with _registry_lock:
        resolvers = list(_registry.values())
    for resolver in resolvers:
        result = resolver(manifest)
        if result is not None:
            return result

    layers_path, layers_how = _resolve_layers(manifest)
    layer_count = len(manifest.lookup(layers_path).children)

    norm_path, norm_how = _resolve_final_norm(manifest, layers_path)

    head_path = _first_named(manifest, HEAD_PATHS, "linear")
    if head_path is not None:
        head_how = NAMED_PATH
    else:
        head_path, head_how = _shape_match(
            manifest, "lm_head", "linear", manifest.config.get("vocab_size"), layers_path)

    embed_path = _first_named(manifest, EMBEDDING_PATHS, "embedding")
    if embed_path is not None:
        embed_how = NAMED_PATH
    else:
        embed_path, embed_how = _shape_match(
            manifest, "embedding", "embedding", manifest.config.get("vocab_size"), layers_path)

    hidden = manifest.config.get("hidden_size")
    if hidden is None:
        raise ProbeError("hidden_dim", "config has no hidden_size entry")

    return AdapterMap(
        layers=layers_path,
        final_norm=norm_path,
        lm_head=head_path,
        embedding=embed_path,
        hidden_dim=int(hidden),
        layer_count=layer_count,
        resolution={
            "layers": layers_how,
            "final_norm": norm_how,
            "lm_head": head_how,
            "embedding": embed_how,
            "hidden_dim": NAMED_PATH,
        },
    )
