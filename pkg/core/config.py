# Copyright 2026 The rasp-dg Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Configuration sections bound to mappings of dotted nodes.

A section declares its parameters as annotated class attributes::

    class Example(Config):
        rate: Annotated[
            float,
            Config.Node("rate"),
            Config.Help("how fast"),
        ] = 0.5

Binding a mapping reads every node, checks its type and rejects the nodes
that no parameter claims. Nested sections bind the sub-mapping found at
their node.
"""

import logging
from collections.abc import Mapping
from enum import Enum

from typing_extensions import NoDefault, get_args, get_type_hints

from .errors import ConfigError, Error
from .util import get_node, is_mutable, set_node, split_path, walk_tree


def validate_logging_config(config):
    if level := get_node(config, "logging.level", None):
        level_nr = logging.getLevelName(str(level).upper())
        if not isinstance(level_nr, int):
            raise ConfigError(f"invalid configuration: node 'logging.level': value '{level}'")


def _is_section(type_):
    return isinstance(type_, type) and issubclass(type_, Config)


class Config:
    class Node:
        def __init__(self, node):
            self.node = node

    class Help:
        def __init__(self, help):
            self.help = help

    class Notes:
        def __init__(self, notes):
            self.notes = notes

    def __init__(self, config=None, /, **overrides):
        if config is None:
            config = {}
        if not isinstance(config, Mapping):
            raise ConfigError(f"invalid configuration: not a mapping: {config} ({type(config).__name__})")
        self.check_config(config)

        fields = {name: (node, type_, default) for name, node, type_, _, _, default in self.params()}
        unknown = set(overrides) - set(fields)
        if unknown:
            raise ConfigError(f"unknown parameters: {', '.join(sorted(unknown))}")

        for name, (node, type_, default) in fields.items():
            if _is_section(type_):
                value = overrides.get(name)
                if value is None:
                    value = type_(get_node(config, node, None))
                elif isinstance(value, Mapping):
                    value = type_(value)
            elif name in overrides:
                value = overrides[name]
            else:
                try:
                    value = get_node(config, node, default)
                except KeyError:
                    raise ConfigError(f"param '{name}': config node not found: '{node}'") from None
            setattr(self, name, self._coerce(name, node, type_, value))

        self.validate()

    @classmethod
    def params(cls):
        """Yield (name, node, type, help, notes, default) for every parameter."""

        try:
            hints = get_type_hints(cls, include_extras=True)
        except NameError as e:
            raise Error(f"cannot resolve annotations for config '{cls.__name__}': {e}") from e
        for name, ann in hints.items():
            args = get_args(ann)
            node = help = notes = None
            for arg in args:
                if isinstance(arg, Config.Node):
                    node = arg.node
                elif isinstance(arg, Config.Help):
                    help = arg.help
                elif isinstance(arg, Config.Notes):
                    notes = arg.notes
            if node is None:
                continue
            default = getattr(cls, name, NoDefault)
            if default is not NoDefault and is_mutable(default):
                raise TypeError(f"param '{name}': mutable default not allowed: {default}")
            yield name, node, args[0], help, notes, default

    @classmethod
    def walk_nodes(cls, prefix=()):
        """Yield (path, type, help, notes, default) of the leaf nodes, nested sections expanded."""

        for _, node, type_, help, notes, default in cls.params():
            path = tuple(prefix) + tuple(split_path(node))
            if _is_section(type_):
                yield from type_.walk_nodes(path)
            else:
                yield path, type_, help, notes, default

    @classmethod
    def check_config(cls, config):
        known = [(path, type_) for path, type_, *_ in cls.walk_nodes()]
        unknown = set()
        for node_path, _ in walk_tree(config):
            node_path = tuple(node_path)
            for param_path, type_ in known:
                if node_path == param_path:
                    break
                if (
                    isinstance(type_, type)
                    and issubclass(type_, Mapping)
                    and len(param_path) < len(node_path)
                    and node_path[: len(param_path)] == param_path
                ):
                    break
            else:
                unknown.add(".".join(str(p) for p in node_path))

        if unknown:
            nodes = "nodes" if len(unknown) > 1 else "node"
            unknown = "', '".join(sorted(unknown))
            raise ConfigError(f"unknown config {nodes}: '{unknown}'")

    @staticmethod
    def _coerce(name, node, type_, value):
        if value is None:
            return value
        if isinstance(type_, type) and issubclass(type_, Enum):
            try:
                return type_(value)
            except ValueError:
                choices = ", ".join(repr(m.value) for m in type_)
                raise ConfigError(f"param '{name}': config node '{node}' invalid value: {value!r} (expected one of {choices})") from None
        if type_ is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type_ is tuple and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        if isinstance(value, type_) and not (type_ in (int, float) and isinstance(value, bool)):
            return value
        value_type = type(value).__name__
        expected_type = type_.__name__
        raise ConfigError(f"param '{name}': config node '{node}' type mismatch: '{value_type}' (expected '{expected_type}')")

    def validate(self):
        pass

    def to_dict(self):
        state = {}
        for name, node, type_, *_ in self.params():
            value = getattr(self, name)
            if isinstance(value, Config):
                value = value.to_dict()
            elif isinstance(value, Enum):
                value = value.value
            elif isinstance(value, tuple):
                value = [list(v) if isinstance(v, tuple) else v for v in value]
            set_node(state, node, value)
        return state

    def replace(self, **overrides):
        return type(self)(self.to_dict(), **overrides)

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        fields = ", ".join(f"{name}={getattr(self, name)!r}" for name, *_ in self.params())
        return f"{type(self).__name__}({fields})"


def merge(base, overrides):
    """Deep-merge ``overrides`` into a copy of ``base``."""

    merged = dict(base)
    for k, v in overrides.items():
        if isinstance(v, Mapping) and isinstance(merged.get(k), Mapping):
            merged[k] = merge(merged[k], v)
        else:
            merged[k] = v
    return merged
