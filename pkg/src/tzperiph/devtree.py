"""Parser for a small subset of device-tree source.

Supported grammar::

    node-name { key = value, ...; child { ... }; ... };

where a value is a quoted string, a ``<cell cell ...>`` list of 32-bit
hex/decimal cells, or a bare word.  ``#address-cells`` and ``#size-cells``
are fixed at 2, so every ``reg`` entry is four cells.  ``//`` and ``/* */``
comments are skipped.
"""

import dataclasses
import re
from typing import Dict, Iterator, List, Optional, Tuple

from tzperiph.errors import DtsSyntaxError, DuplicateNodeName

ADDRESS_CELLS = 2
SIZE_CELLS = 2

_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<cells><[^>]*>)
  | (?P<punct>[{};=,])
  | (?P<word>[A-Za-z0-9_.@#+\-/][A-Za-z0-9_.@#+\-/,]*)
""", re.VERBOSE | re.DOTALL)


@dataclasses.dataclass
class DeviceNode:
    name: str
    compatible: List[str] = dataclasses.field(default_factory=list)
    reg: List[Tuple[int, int]] = dataclasses.field(default_factory=list)
    status: str = "okay"
    secure_status: str = "nonsecure"
    properties: Dict[str, str] = dataclasses.field(default_factory=dict)

    @property
    def enabled(self) -> bool:
        return self.status == "okay"

    @property
    def secure(self) -> bool:
        return self.secure_status == "secure"


@dataclasses.dataclass
class _Token:
    kind: str
    text: str
    line: int


def _tokenize(text: str) -> Iterator[_Token]:
    pos, line = 0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DtsSyntaxError(f"unexpected character {text[pos]!r}", line)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            yield _Token(kind, m.group(), line)
        line += m.group().count("\n")
        pos = m.end()


def _parse_cells(tok: _Token) -> List[int]:
    cells = []
    for word in tok.text[1:-1].split():
        try:
            value = int(word, 0)
        except ValueError:
            raise DtsSyntaxError(f"bad cell {word!r}", tok.line) from None
        if not 0 <= value <= 0xFFFFFFFF:
            raise DtsSyntaxError(f"cell {word} exceeds 32 bits", tok.line)
        cells.append(value)
    return cells


def _unquote(tok: _Token) -> str:
    return bytes(tok.text[1:-1], "utf-8").decode("unicode_escape")


class _Parser:

    def __init__(self, text: str):
        self.tokens = list(_tokenize(text))
        self.pos = 0
        self.nodes: List[DeviceNode] = []
        self.names = set()

    def peek(self) -> Optional[_Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> _Token:
        tok = self.peek()
        if tok is None:
            last = self.tokens[-1].line if self.tokens else 1
            raise DtsSyntaxError("unexpected end of input", last)
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.take()
        if tok.text != text:
            raise DtsSyntaxError(f"expected {text!r}, got {tok.text!r}",
                                 tok.line)
        return tok

    def parse(self) -> List[DeviceNode]:
        while self.peek() is not None:
            self.node()
        return self.nodes

    def node(self) -> None:
        head = self.take()
        if head.kind != "word":
            raise DtsSyntaxError(f"expected node name, got {head.text!r}",
                                 head.line)
        self.expect("{")
        if head.text in self.names:
            raise DuplicateNodeName(f"line {head.line}: {head.text}")
        self.names.add(head.text)
        node = DeviceNode(head.text)
        self.nodes.append(node)
        while True:
            tok = self.peek()
            if tok is None:
                raise DtsSyntaxError(f"node {head.text!r} is never closed",
                                     head.line)
            if tok.text == "}":
                self.take()
                self.expect(";")
                return
            if tok.kind != "word":
                raise DtsSyntaxError(f"unexpected {tok.text!r}", tok.line)
            nxt = (self.tokens[self.pos + 1]
                   if self.pos + 1 < len(self.tokens) else None)
            if nxt is not None and nxt.text == "{":
                self.node()
            else:
                self.prop(node)

    def prop(self, node: DeviceNode) -> None:
        key = self.take()
        values: List[_Token] = []
        if self.peek() is not None and self.peek().text == "=":
            self.take()
            values.append(self.value())
            while self.peek() is not None and self.peek().text == ",":
                self.take()
                values.append(self.value())
        self.expect(";")
        _apply(node, key, values)

    def value(self) -> _Token:
        tok = self.take()
        if tok.kind not in ("string", "cells", "word"):
            raise DtsSyntaxError(f"bad property value {tok.text!r}", tok.line)
        return tok


def _canonical(tok: _Token) -> str:
    if tok.kind == "cells":
        return "<" + " ".join(f"{c:#x}" for c in _parse_cells(tok)) + ">"
    return tok.text


def _text_value(key: _Token, values: List[_Token]) -> str:
    if len(values) != 1 or values[0].kind not in ("string", "word"):
        raise DtsSyntaxError(f"{key.text} takes a single string", key.line)
    tok = values[0]
    return _unquote(tok) if tok.kind == "string" else tok.text


def _apply(node: DeviceNode, key: _Token, values: List[_Token]) -> None:
    name = key.text
    if name == "compatible":
        if not values or any(v.kind != "string" for v in values):
            raise DtsSyntaxError("compatible takes quoted strings", key.line)
        node.compatible = [_unquote(v) for v in values]
    elif name == "reg":
        cells = []
        for v in values:
            if v.kind != "cells":
                raise DtsSyntaxError("reg takes <cells>", key.line)
            cells += _parse_cells(v)
        group = ADDRESS_CELLS + SIZE_CELLS
        if not cells or len(cells) % group:
            raise DtsSyntaxError(
                f"reg needs a multiple of {group} cells", key.line)
        reg = []
        for i in range(0, len(cells), group):
            base = (cells[i] << 32) | cells[i + 1]
            size = (cells[i + 2] << 32) | cells[i + 3]
            if size == 0:
                raise DtsSyntaxError("reg entry with zero size", key.line)
            reg.append((base, size))
        node.reg = reg
    elif name == "status":
        value = _text_value(key, values)
        node.status = "okay" if value in ("okay", "ok") else "disabled"
    elif name == "secure-status":
        value = _text_value(key, values)
        if value not in ("secure", "nonsecure"):
            raise DtsSyntaxError(f"secure-status {value!r}", key.line)
        node.secure_status = value
    else:
        node.properties[name] = ", ".join(_canonical(v) for v in values)


def parse(dts_text: str) -> List[DeviceNode]:
    """Parse DTS-subset text into nodes, in document order (depth first)."""
    return _Parser(dts_text).parse()


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_dts(nodes: List[DeviceNode]) -> str:
    """Print nodes as flat top-level blocks that :func:`parse` reads back."""
    out = []
    for node in nodes:
        out.append(f"{node.name} {{")
        if node.compatible:
            out.append("\tcompatible = "
                       + ", ".join(_quote(c) for c in node.compatible) + ";")
        if node.reg:
            cells = []
            for base, size in node.reg:
                cells += [base >> 32, base & 0xFFFFFFFF,
                          size >> 32, size & 0xFFFFFFFF]
            out.append("\treg = <" + " ".join(f"{c:#x}" for c in cells) + ">;")
        out.append(f'\tstatus = "{node.status}";')
        out.append(f'\tsecure-status = "{node.secure_status}";')
        for key, value in node.properties.items():
            out.append(f"\t{key} = {value};" if value else f"\t{key};")
        out.append("};")
    return "\n".join(out) + "\n"


def find_by_compatible(nodes: List[DeviceNode],
                       pattern: str) -> List[DeviceNode]:
    return [n for n in nodes if any(pattern in c for c in n.compatible)]


def secure_regions(nodes: List[DeviceNode]) -> List[Tuple[int, int]]:
    """Register windows of enabled nodes marked ``secure-status = "secure"``."""
    return [window for n in nodes if n.secure and n.enabled
            for window in n.reg]
