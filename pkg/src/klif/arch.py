"""Parser for the compact architecture notation.

Grammar (whitespace is not allowed)::

    arch     := encoder ( "-" item )* "-" decoder
    encoder  := "(" conv ( "+" conv )* ")(encoding)"
    decoder  := "(" n "FC-AP" p ")(decoding)"
    item     := conv | "MP2" | n "FC" | "(" item ( "-" item )* ")*" n
    conv     := n "C3"

Example: ``(128C3+128C3+128C3)(encoding)-128C3-MP2-2048FC-(100FC-AP10)(decoding)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union


class ArchParseError(ValueError):
    def __init__(self, message: str, text: str, pos: int):
        super().__init__(f"{message} at position {pos}: {text[:pos]}>>{text[pos:]}")
        self.pos = pos


@dataclass(frozen=True)
class Encoder:
    channels: int
    branches: int = 3


@dataclass(frozen=True)
class Conv:
    channels: int


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class FC:
    features: int


@dataclass(frozen=True)
class Repeat:
    items: tuple
    times: int


@dataclass(frozen=True)
class DecoderHead:
    width: int
    pool: int = 10

    @property
    def classes(self) -> int:
        return self.width // self.pool


@dataclass(frozen=True)
class Spiking:
    """Marker for the spiking layer that follows every conv / FC stage."""


Item = Union[Conv, MaxPool, FC, Repeat]


@dataclass(frozen=True)
class NetworkSpec:
    encoder: Encoder
    body: tuple
    decoder: DecoderHead

    def expanded_body(self) -> list:
        """Body items with every ``Repeat`` unrolled."""
        out: list = []

        def walk(items):
            for it in items:
                if isinstance(it, Repeat):
                    for _ in range(it.times):
                        walk(it.items)
                else:
                    out.append(it)

        walk(self.body)
        return out

    def layers(self) -> list:
        """Flat layer list with the implied spiking layers made explicit."""
        out: list = [self.encoder, Spiking()]
        for it in self.expanded_body():
            out.append(it)
            if not isinstance(it, MaxPool):
                out.append(Spiking())
        out += [self.decoder, Spiking()]
        return out

    @property
    def num_spiking(self) -> int:
        return sum(isinstance(x, Spiking) for x in self.layers())


_INT = re.compile(r"[1-9][0-9]*")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, msg: str, pos: int | None = None):
        raise ArchParseError(msg, self.text, self.pos if pos is None else pos)

    def peek(self, s: str) -> bool:
        return self.text.startswith(s, self.pos)

    def eat(self, s: str) -> None:
        if not self.peek(s):
            self.fail(f"expected {s!r}")
        self.pos += len(s)

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def int_(self) -> int:
        m = _INT.match(self.text, self.pos)
        if not m:
            self.fail("expected a positive integer")
        self.pos = m.end()
        return int(m.group())

    def conv(self) -> Conv:
        n = self.int_()
        self.eat("C3")
        return Conv(n)

    def encoder(self) -> Encoder:
        start = self.pos
        if not self.peek("("):
            self.fail("architecture must start with an (...)(encoding) block")
        self.eat("(")
        convs = [self.conv()]
        while self.peek("+"):
            self.eat("+")
            convs.append(self.conv())
        self.eat(")")
        if not self.peek("(encoding)"):
            self.fail("missing encoder: expected '(encoding)'")
        self.eat("(encoding)")
        if len({c.channels for c in convs}) != 1:
            self.fail("encoder branches must have equal channel counts", start)
        return Encoder(convs[0].channels, len(convs))

    def item(self) -> Item:
        if self.peek("MP2"):
            self.eat("MP2")
            return MaxPool()
        if self.peek("("):
            start = self.pos
            self.eat("(")
            items = [self.item()]
            while self.peek("-"):
                self.eat("-")
                items.append(self.item())
            self.eat(")")
            if self.peek("(decoding)") or self.peek("(encoding)"):
                self.fail("coding block in the middle of the body", start)
            if not self.peek("*"):
                self.fail("malformed repetition: expected '*n' after group")
            self.eat("*")
            return Repeat(tuple(items), self.int_())
        start = self.pos
        n = self.int_()
        if self.peek("C3"):
            self.eat("C3")
            return Conv(n)
        if self.peek("FC"):
            self.eat("FC")
            return FC(n)
        self.fail("unknown token", start)

    def decoder(self) -> DecoderHead:
        self.eat("(")
        width = self.int_()
        self.eat("FC-AP")
        pool = self.int_()
        self.eat(")")
        self.eat("(decoding)")
        if width % pool:
            self.fail(f"decoder width {width} not divisible by pool {pool}")
        return DecoderHead(width, pool)

    def is_decoder_ahead(self) -> bool:
        m = re.compile(r"\([0-9]+FC-AP[0-9]+\)").match(self.text, self.pos)
        return bool(m)

    def parse(self) -> NetworkSpec:
        enc = self.encoder()
        body: list = []
        dec = None
        while not self.at_end():
            self.eat("-")
            if self.is_decoder_ahead():
                dec = self.decoder()
                break
            body.append(self.item())
        if dec is None:
            self.fail("missing decoder: expected a final (nFC-APp)(decoding) block")
        if not self.at_end():
            self.fail("trailing characters after decoder")
        return NetworkSpec(enc, tuple(body), dec)


def parse_arch(text: str) -> NetworkSpec:
    return _Parser(text.strip()).parse()


def _render_item(it) -> str:
    if isinstance(it, Conv):
        return f"{it.channels}C3"
    if isinstance(it, MaxPool):
        return "MP2"
    if isinstance(it, FC):
        return f"{it.features}FC"
    if isinstance(it, Repeat):
        return "(" + "-".join(_render_item(x) for x in it.items) + f")*{it.times}"
    raise TypeError(f"cannot render {it!r}")


def render(spec: NetworkSpec) -> str:
    enc = "+".join([f"{spec.encoder.channels}C3"] * spec.encoder.branches)
    parts = [f"({enc})(encoding)"]
    parts += [_render_item(it) for it in spec.body]
    parts.append(f"({spec.decoder.width}FC-AP{spec.decoder.pool})(decoding)")
    return "-".join(parts)


# full-size architectures, plus the desk-scale ones used in tests
MNIST_ARCH = "(128C3+128C3+128C3)(encoding)-128C3-MP2-2048FC-(100FC-AP10)(decoding)"
CIFAR10_ARCH = "(128C3+128C3+128C3)(encoding)-(256C3-256C3-256C3-MP2)*2-2048FC-(100FC-AP10)(decoding)"
CIFAR10_DVS_ARCH = "(128C3+128C3+128C3)(encoding)-(128C3-MP2)*3-512FC-(100FC-AP10)(decoding)"
DVS_GESTURE_ARCH = "(128C3+128C3+128C3)(encoding)-(128C3-MP2)*4-512FC-(110FC-AP10)(decoding)"
FULL_SIZE_ARCHS = (MNIST_ARCH, CIFAR10_ARCH, CIFAR10_DVS_ARCH, DVS_GESTURE_ARCH)

DESK_MNIST_ARCH = "(16C3+16C3+16C3)(encoding)-16C3-MP2-256FC-(100FC-AP10)(decoding)"
GRADCHECK_ARCH = "(4C3+4C3+4C3)(encoding)-8C3-MP2-(20FC-AP10)(decoding)"
