"""Protocol messages exchanged between the five entity roles.

Every message is signed by its sender's certified key.  The signature
covers the routing header and the business payload but deliberately not the
sealed token bytes: the token authenticates itself end-to-end to the
issuing bank through its own two encryption layers, and hop signatures must
not turn intermediaries into tamper oracles.  A mutated envelope therefore
travels to the bank, where detection (and the tamper report) belongs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum

from . import crypto
from .crypto import Certificate
from .tokens import SealedToken


class Role(str, Enum):
    CUSTOMER = "C"
    MERCHANT = "M"
    CUSTOMER_BANK = "CB"
    MERCHANT_BANK = "MB"
    TTP = "TTP"


@dataclass(frozen=True)
class EntityId:
    role: Role
    index: int

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"

    @staticmethod
    def parse(text: str) -> "EntityId":
        for role in sorted(Role, key=lambda r: -len(r.value)):
            if text.startswith(role.value) and text[len(role.value):].isdigit():
                return EntityId(role, int(text[len(role.value):]))
        raise ValueError(f"not an entity id: {text!r}")


@dataclass(frozen=True)
class TransactionId:
    """Customer-scoped transaction name, e.g. C0-1 for C0's first purchase."""

    customer: EntityId
    serial: int

    def __str__(self) -> str:
        return f"{self.customer}-{self.serial}"

    @staticmethod
    def parse(text: str) -> "TransactionId":
        head, _, tail = text.rpartition("-")
        if not head or not tail.isdigit():
            raise ValueError(f"not a transaction id: {text!r}")
        return TransactionId(EntityId.parse(head), int(tail))


@dataclass(frozen=True)
class OrderInfo:
    """What is being bought, shared by customer and merchant (and escrowed
    at the arbiter); banks never see product or quantity."""

    order_number: str
    product: str
    quantity: int
    unit_price: int
    total_price: int
    merchant: EntityId

    def __post_init__(self):
        if self.quantity <= 0:
            raise ValueError("quantity must be positive")
        if self.unit_price <= 0 or self.total_price <= 0:
            raise ValueError("prices must be positive minor units")
        if self.total_price != self.unit_price * self.quantity:
            raise ValueError("total_price must equal unit_price * quantity")


class MsgKind(str, Enum):
    BROWSE = "Browse"
    OFFER = "Offer"
    TRUST_LOOKUP = "TrustLookup"
    TRUST_REPLY = "TrustReply"
    TOKEN_REQUEST = "TokenRequest"
    TOKEN_ISSUED = "TokenIssued"
    PURCHASE_CONFIRM = "PurchaseConfirm"
    ESCROW_DEPOSIT = "EscrowDeposit"
    TEMP_PAYMENT_QUERY = "TempPaymentQuery"
    TEMP_PAYMENT_ACK = "TempPaymentAck"
    GOODS_DISPATCH = "GoodsDispatch"
    ACCEPT_GOODS = "AcceptGoods"
    REJECT_GOODS = "RejectGoods"
    TOKEN_RELEASE = "TokenRelease"
    PAYMENT_REQUEST = "PaymentRequest"
    SETTLEMENT = "Settlement"
    TAMPER_REPORT = "TamperReport"
    REGENERATE_REQUEST = "RegenerateRequest"
    COMPLETION_NOTICE = "CompletionNotice"
    ESCROW_CANCEL = "EscrowCancel"
    ABORT_NOTICE = "AbortNotice"


# ---------------------------------------------------------------------------
# Payloads, one dataclass per message kind.

@dataclass(frozen=True)
class Browse:
    product: str
    quantity: int


@dataclass(frozen=True)
class Offer:
    order: OrderInfo
    merchant_cert: Certificate


@dataclass(frozen=True)
class TrustLookup:
    merchant: EntityId


@dataclass(frozen=True)
class TrustReply:
    rated: bool
    trust_factor: str | None = None
    grade: str | None = None


@dataclass(frozen=True)
class TokenRequest:
    amount: int
    customer_cert: Certificate
    merchant_cert: Certificate


@dataclass(frozen=True)
class TokenIssued:
    sealed: SealedToken


@dataclass(frozen=True)
class PurchaseConfirm:
    order: OrderInfo
    customer_cert: Certificate


@dataclass(frozen=True)
class EscrowDeposit:
    order: OrderInfo
    sealed: SealedToken


@dataclass(frozen=True)
class TempPaymentQuery:
    order_number: str


@dataclass(frozen=True)
class TempPaymentAck:
    token_digest: str
    amount: int


@dataclass(frozen=True)
class GoodsDispatch:
    order_number: str
    product: str
    quantity: int
    replacement: bool = False


@dataclass(frozen=True)
class AcceptGoods:
    order_number: str


@dataclass(frozen=True)
class RejectGoods:
    order_number: str
    reason: str = "unsatisfactory"


@dataclass(frozen=True)
class TokenRelease:
    sealed: SealedToken
    merchant: EntityId


@dataclass(frozen=True)
class PaymentRequest:
    sealed: SealedToken
    merchant: EntityId


@dataclass(frozen=True)
class Settlement:
    amount: int
    duplicate: bool = False


@dataclass(frozen=True)
class TamperReport:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class RegenerateRequest:
    reason: str = "tamper"


@dataclass(frozen=True)
class CompletionNotice:
    status: str
    reason: str = ""

    def __post_init__(self):
        if self.status not in ("completed", "aborted"):
            raise ValueError("status must be completed or aborted")


@dataclass(frozen=True)
class EscrowCancel:
    reason: str


@dataclass(frozen=True)
class AbortNotice:
    reason: str


PAYLOAD_TYPES = {
    MsgKind.BROWSE: Browse,
    MsgKind.OFFER: Offer,
    MsgKind.TRUST_LOOKUP: TrustLookup,
    MsgKind.TRUST_REPLY: TrustReply,
    MsgKind.TOKEN_REQUEST: TokenRequest,
    MsgKind.TOKEN_ISSUED: TokenIssued,
    MsgKind.PURCHASE_CONFIRM: PurchaseConfirm,
    MsgKind.ESCROW_DEPOSIT: EscrowDeposit,
    MsgKind.TEMP_PAYMENT_QUERY: TempPaymentQuery,
    MsgKind.TEMP_PAYMENT_ACK: TempPaymentAck,
    MsgKind.GOODS_DISPATCH: GoodsDispatch,
    MsgKind.ACCEPT_GOODS: AcceptGoods,
    MsgKind.REJECT_GOODS: RejectGoods,
    MsgKind.TOKEN_RELEASE: TokenRelease,
    MsgKind.PAYMENT_REQUEST: PaymentRequest,
    MsgKind.SETTLEMENT: Settlement,
    MsgKind.TAMPER_REPORT: TamperReport,
    MsgKind.REGENERATE_REQUEST: RegenerateRequest,
    MsgKind.COMPLETION_NOTICE: CompletionNotice,
    MsgKind.ESCROW_CANCEL: EscrowCancel,
    MsgKind.ABORT_NOTICE: AbortNotice,
}

# Field name whose bytes are excluded from hop signatures (see module doc).
_SIGN_EXEMPT = "sealed"
_MASK = "<sealed>"


def _jsonable(value, mask_sealed: bool):
    if isinstance(value, SealedToken):
        return _MASK if mask_sealed else value.envelope.hex()
    if isinstance(value, Certificate):
        return {"subject": value.subject,
                "public_key": value.public_key.hex(),
                "signature": value.signature.hex()}
    if isinstance(value, (EntityId, TransactionId)):
        return str(value)
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bytes):
        return value.hex()
    if is_dataclass(value):
        return {f.name: _jsonable(getattr(value, f.name), mask_sealed)
                for f in fields(value)}
    if isinstance(value, (str, int, bool)) or value is None:
        return value
    raise TypeError(f"cannot canonicalize {type(value).__name__}")


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def payload_dict(msg: "ProtocolMessage") -> dict | str | int | None:
    return _jsonable(msg.payload, mask_sealed=False)


def order_digest(order: OrderInfo) -> str:
    return hashlib.sha256(_canon(_jsonable(order, False))).hexdigest()


def sealed_digest(sealed: SealedToken) -> str:
    return hashlib.sha256(sealed.envelope).hexdigest()


@dataclass
class ProtocolMessage:
    kind: MsgKind
    sender: EntityId
    receiver: EntityId
    txn: TransactionId
    payload: object
    signature: bytes = b""

    def __post_init__(self):
        expected = PAYLOAD_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.kind.value} payload must be "
                            f"{expected.__name__}")

    def _header(self, mask_sealed: bool) -> dict:
        return {
            "kind": self.kind.value,
            "sender": str(self.sender),
            "receiver": str(self.receiver),
            "txn": str(self.txn),
            "payload": _jsonable(self.payload, mask_sealed),
        }

    def signing_bytes(self) -> bytes:
        return _canon(self._header(mask_sealed=True))

    def canonical_bytes(self) -> bytes:
        body = self._header(mask_sealed=False)
        body["signature"] = self.signature.hex()
        return _canon(body)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_bytes()).hexdigest()

    def edge(self) -> tuple[str, str]:
        return (str(self.sender), str(self.receiver))

    def sealed_token(self) -> SealedToken | None:
        return getattr(self.payload, _SIGN_EXEMPT, None)

    def with_sealed(self, sealed: SealedToken) -> "ProtocolMessage":
        """Copy of this message with the sealed bytes swapped out.  The
        signature is kept as-is; it remains valid because hop signatures
        exclude the sealed field."""
        if self.sealed_token() is None:
            raise ValueError(f"{self.kind.value} carries no sealed token")
        payload_fields = {f.name: getattr(self.payload, f.name)
                          for f in fields(self.payload)}
        payload_fields[_SIGN_EXEMPT] = sealed
        return ProtocolMessage(self.kind, self.sender, self.receiver,
                               self.txn, type(self.payload)(**payload_fields),
                               self.signature)


def sign_message(msg: ProtocolMessage, key) -> ProtocolMessage:
    msg.signature = crypto.sign(key, msg.signing_bytes())
    return msg


def verify_message(msg: ProtocolMessage, sender_cert: Certificate,
                   root_public: bytes) -> bool:
    if str(msg.sender) != sender_cert.subject:
        return False
    if not crypto.verify_certificate(sender_cert, root_public):
        return False
    return crypto.verify(sender_cert.public_key, msg.signature,
                         msg.signing_bytes())
