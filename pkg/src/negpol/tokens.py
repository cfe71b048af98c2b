"""Extended offers and the tokens recording the sub-offers behind them.

A token is either opaque bytes (what a client, or a parent negotiator, sees
from a remote or base-case negotiator) or a ``PolicySum`` of ``RuleOffer``
nodes, each listing the sub-offers it was computed from.  On the wire a token
travels as a blob: an HMAC-SHA256 tag followed by the canonical JSON of the
whole extended offer, so a client cannot forge or re-pair offers.
"""
from __future__ import annotations

import hashlib
import hmac
import json
import os
from dataclasses import dataclass
from typing import Optional, Union

from .config import ConfigType, format_config_type, parse_config_type
from .logic import FALSE, Formula, Var
from .syntax import format_formula, parse_formula

TOKEN_KEY_ENV = "NEGPOL_TOKEN_KEY"
_TAG_LEN = 32


@dataclass(frozen=True)
class Opaque:
    data: bytes = b""


@dataclass(frozen=True)
class SubOffer:
    server: str
    ct: ConfigType
    offer: "ExtendedOffer"


@dataclass(frozen=True)
class RuleOffer:
    formula: Formula
    # the rule condition the sub-offers were combined with
    assignment: Formula
    subs: tuple[SubOffer, ...] = ()
    fired: bool = True
    label: str = ""


@dataclass(frozen=True)
class PolicySum:
    offers: tuple[RuleOffer, ...]
    preferences: tuple[tuple[Var, str], ...] = ()


Token = Union[Opaque, PolicySum]


@dataclass(frozen=True)
class ExtendedOffer:
    formula: Formula
    token: Token = Opaque()


class TokenError(Exception):
    pass


# -- canonical JSON -----------------------------------------------------------


def _var_json(x: Var) -> str:
    return str(x)


def var_from(s: str) -> Var:
    if "." in s:
        prefix, name = s.split(".", 1)
        return Var(name, prefix)
    return Var(s)


def token_to_json(t: Token) -> dict:
    if isinstance(t, Opaque):
        return {"opaque": t.data.hex()}
    return {
        "sum": [_rule_offer_json(ro) for ro in t.offers],
        "prefs": [[_var_json(x), d] for x, d in t.preferences],
    }


def _rule_offer_json(ro: RuleOffer) -> dict:
    return {
        "offer": format_formula(ro.formula),
        "assn": format_formula(ro.assignment),
        "fired": ro.fired,
        "label": ro.label,
        "subs": [
            {"server": s.server, "type": format_config_type(s.ct), "type_name": s.ct.name,
             "offer": offer_to_json(s.offer)}
            for s in ro.subs
        ],
    }


def offer_to_json(eo: ExtendedOffer) -> dict:
    return {"formula": format_formula(eo.formula), "token": token_to_json(eo.token)}


def token_from_json(d: dict) -> Token:
    if "opaque" in d:
        return Opaque(bytes.fromhex(d["opaque"]))
    offers = []
    for ro in d["sum"]:
        subs = tuple(
            SubOffer(s["server"], parse_config_type(s["type"], s.get("type_name"), check=False),
                     offer_from_json(s["offer"]))
            for s in ro["subs"]
        )
        offers.append(RuleOffer(parse_formula(ro["offer"]), parse_formula(ro["assn"]),
                                subs, ro["fired"], ro["label"]))
    prefs = tuple((var_from(x), dirn) for x, dirn in d["prefs"])
    return PolicySum(tuple(offers), prefs)


def offer_from_json(d: dict) -> ExtendedOffer:
    return ExtendedOffer(parse_formula(d["formula"]), token_from_json(d["token"]))


def canonical_bytes(eo: ExtendedOffer) -> bytes:
    return json.dumps(offer_to_json(eo), sort_keys=True, separators=(",", ":")).encode()


# -- signing ------------------------------------------------------------------


class TokenSigner:
    """Keyed hash over the canonical serialization of an extended offer."""

    def __init__(self, key: Optional[bytes] = None):
        if key is None:
            env = os.environ.get(TOKEN_KEY_ENV)
            key = env.encode() if env else os.urandom(32)
        self.key = key

    def blob(self, eo: ExtendedOffer) -> bytes:
        body = canonical_bytes(eo)
        return hmac.new(self.key, body, hashlib.sha256).digest() + body

    def open(self, blob: bytes) -> ExtendedOffer:
        tag, body = blob[:_TAG_LEN], blob[_TAG_LEN:]
        expected = hmac.new(self.key, body, hashlib.sha256).digest()
        if len(tag) != _TAG_LEN or not hmac.compare_digest(tag, expected):
            raise TokenError("token authentication failed")
        try:
            return offer_from_json(json.loads(body))
        except (ValueError, KeyError, TypeError) as exc:
            raise TokenError(f"malformed token: {exc}") from None


_default_signer: Optional[TokenSigner] = None


def default_signer() -> TokenSigner:
    global _default_signer
    if _default_signer is None:
        _default_signer = TokenSigner()
    return _default_signer


def false_offer(reason: str = "") -> ExtendedOffer:
    return ExtendedOffer(FALSE, Opaque(reason.encode()))
