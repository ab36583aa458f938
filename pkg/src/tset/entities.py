"""The five protocol roles as deterministic per-transaction state machines.

Customer, Merchant, CustomerBank (token issuer), MerchantBank (acquirer),
and Ttp (escrow arbiter) each hold a phase per transaction and share a
legality table mapping (phase, message kind) to the permitted next phases
and emissions.  A message that arrives outside its legal phase is a
protocol violation: logged and ignored, never applied.  Pairs listed with
no transition are deliberate absorbs for late or duplicate traffic.

Money never leaves double-entry form.  The issuing bank moves a hold from
the customer account into its escrow pool at token issuance, so settlement
can never fail for funds; cancellation moves the hold back; settlement
moves it out toward the acquirer.  Amounts are integer minor units.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from . import crypto, messages as m, tokens
from .crypto import Certificate
from .ledger import Ledger, LedgerEntry, trust_lookup
from .messages import EntityId, MsgKind, OrderInfo, ProtocolMessage, TransactionId
from .rng import ByteStream
from .tokens import KeyMaterial, SealedToken, TokenMint, Verdict
from .trust import Disposition, Grade, TrustRecord, record_outcome

DEFAULT_DEADLINE_TICKS = 100
DEFAULT_REGENERATE_CAP = 3
DEFAULT_SETTLE_RETRY_TICKS = 25
DEFAULT_SETTLE_RETRY_CAP = 5


class InsufficientFunds(Exception):
    """Customer account cannot cover the requested token amount."""


class DuplicateDeposit(Exception):
    """A second escrow deposit arrived for a transaction already holding one."""


# ---------------------------------------------------------------------------
# Phases

class CustomerPhase(str, Enum):
    START = "Start"
    AWAIT_OFFER = "AwaitOffer"
    AWAIT_TRUST = "AwaitTrust"
    AWAIT_TOKEN = "AwaitToken"
    AWAIT_GOODS = "AwaitGoods"
    AWAIT_COMPLETION = "AwaitCompletion"
    DONE = "Done"
    ABORTED = "Aborted"


class MerchantPhase(str, Enum):
    NEW = "New"
    AWAIT_CONFIRM = "AwaitConfirm"
    AWAIT_ACK = "AwaitAck"
    AWAIT_CAPTURE = "AwaitCapture"
    DONE = "Done"
    ABORTED = "Aborted"


class IssuerPhase(str, Enum):
    NEW = "New"
    ISSUED = "Issued"
    TAMPER_WAIT = "TamperWait"
    SETTLED = "Settled"
    CANCELLED = "Cancelled"


class AcquirerPhase(str, Enum):
    NEW = "New"
    AWAIT_PAYMENT = "AwaitPayment"
    SETTLED = "Settled"
    ABORTED = "Aborted"


class ArbiterPhase(str, Enum):
    NEW = "New"
    QUOTED = "Quoted"
    HELD = "Held"
    DISPATCHED = "Dispatched"
    REPLACING = "Replacing"
    RELEASED = "Released"
    SETTLED = "Settled"
    ABORTED = "Aborted"
    EXPIRED = "Expired"


# ---------------------------------------------------------------------------
# Legality table: (phase, kind) -> permitted next phases and emissions.
# A pair absent from a table is a protocol violation in that phase.

@dataclass(frozen=True)
class Rule:
    next: tuple
    emits: tuple = ()


def _table(*rows) -> dict:
    return {(phase, kind): Rule(tuple(nxt), tuple(emits))
            for phase, kind, nxt, emits in rows}


K = MsgKind
CP, MP, IP, AP, TP = (CustomerPhase, MerchantPhase, IssuerPhase,
                      AcquirerPhase, ArbiterPhase)

CUSTOMER_TABLE = _table(
    (CP.AWAIT_OFFER, K.OFFER, [CP.AWAIT_TRUST], [K.TRUST_LOOKUP]),
    (CP.AWAIT_TRUST, K.TRUST_REPLY, [CP.AWAIT_TOKEN, CP.ABORTED],
     [K.TOKEN_REQUEST, K.ABORT_NOTICE]),
    # Arbiter may expire the txn while the trust reply is lost in transit.
    (CP.AWAIT_TRUST, K.COMPLETION_NOTICE, [CP.ABORTED], []),
    (CP.AWAIT_TOKEN, K.TOKEN_ISSUED, [CP.AWAIT_GOODS],
     [K.PURCHASE_CONFIRM, K.ESCROW_DEPOSIT]),
    (CP.AWAIT_TOKEN, K.COMPLETION_NOTICE, [CP.ABORTED], [K.ABORT_NOTICE]),
    (CP.AWAIT_TOKEN, K.GOODS_DISPATCH, [CP.AWAIT_TOKEN], []),
    (CP.AWAIT_GOODS, K.GOODS_DISPATCH, [CP.AWAIT_COMPLETION, CP.AWAIT_GOODS],
     [K.ACCEPT_GOODS, K.REJECT_GOODS]),
    (CP.AWAIT_GOODS, K.COMPLETION_NOTICE, [CP.ABORTED], []),
    (CP.AWAIT_COMPLETION, K.COMPLETION_NOTICE, [CP.DONE, CP.ABORTED], []),
    (CP.AWAIT_COMPLETION, K.REGENERATE_REQUEST, [CP.AWAIT_TOKEN],
     [K.TOKEN_REQUEST]),
    (CP.DONE, K.COMPLETION_NOTICE, [CP.DONE], []),
    (CP.DONE, K.GOODS_DISPATCH, [CP.DONE], []),
    (CP.ABORTED, K.COMPLETION_NOTICE, [CP.ABORTED], []),
    (CP.ABORTED, K.GOODS_DISPATCH, [CP.ABORTED], []),
    (CP.ABORTED, K.TOKEN_ISSUED, [CP.ABORTED], []),
    (CP.ABORTED, K.REGENERATE_REQUEST, [CP.ABORTED], []),
)

MERCHANT_TABLE = _table(
    (MP.NEW, K.BROWSE, [MP.AWAIT_CONFIRM], [K.OFFER]),
    (MP.AWAIT_CONFIRM, K.PURCHASE_CONFIRM, [MP.AWAIT_ACK],
     [K.TEMP_PAYMENT_QUERY]),
    (MP.AWAIT_CONFIRM, K.COMPLETION_NOTICE, [MP.ABORTED], []),
    (MP.AWAIT_ACK, K.TEMP_PAYMENT_ACK, [MP.AWAIT_CAPTURE],
     [K.GOODS_DISPATCH]),
    (MP.AWAIT_ACK, K.COMPLETION_NOTICE, [MP.ABORTED], []),
    (MP.AWAIT_CAPTURE, K.REJECT_GOODS, [MP.AWAIT_CAPTURE],
     [K.GOODS_DISPATCH]),
    (MP.AWAIT_CAPTURE, K.SETTLEMENT, [MP.DONE], [K.COMPLETION_NOTICE]),
    (MP.AWAIT_CAPTURE, K.PURCHASE_CONFIRM, [MP.AWAIT_ACK],
     [K.TEMP_PAYMENT_QUERY]),
    (MP.AWAIT_CAPTURE, K.COMPLETION_NOTICE, [MP.ABORTED], []),
    (MP.ABORTED, K.SETTLEMENT, [MP.DONE], [K.COMPLETION_NOTICE]),
    (MP.ABORTED, K.REJECT_GOODS, [MP.ABORTED], []),
    (MP.ABORTED, K.COMPLETION_NOTICE, [MP.ABORTED], []),
    (MP.DONE, K.SETTLEMENT, [MP.DONE], []),
    (MP.DONE, K.COMPLETION_NOTICE, [MP.DONE], []),
)

ISSUER_TABLE = _table(
    (IP.NEW, K.TOKEN_REQUEST, [IP.ISSUED, IP.CANCELLED],
     [K.TOKEN_ISSUED, K.COMPLETION_NOTICE]),
    (IP.NEW, K.ESCROW_CANCEL, [IP.CANCELLED], []),
    (IP.ISSUED, K.PAYMENT_REQUEST, [IP.SETTLED, IP.TAMPER_WAIT],
     [K.SETTLEMENT, K.COMPLETION_NOTICE, K.TAMPER_REPORT]),
    (IP.ISSUED, K.ESCROW_CANCEL, [IP.CANCELLED], []),
    (IP.TAMPER_WAIT, K.TOKEN_REQUEST, [IP.ISSUED], [K.TOKEN_ISSUED]),
    (IP.TAMPER_WAIT, K.PAYMENT_REQUEST, [IP.TAMPER_WAIT], [K.TAMPER_REPORT]),
    (IP.TAMPER_WAIT, K.ESCROW_CANCEL, [IP.CANCELLED], []),
    (IP.SETTLED, K.PAYMENT_REQUEST, [IP.SETTLED],
     [K.TAMPER_REPORT, K.SETTLEMENT]),
    (IP.SETTLED, K.ESCROW_CANCEL, [IP.SETTLED], []),
    (IP.CANCELLED, K.PAYMENT_REQUEST, [IP.CANCELLED], [K.TAMPER_REPORT]),
    (IP.CANCELLED, K.ESCROW_CANCEL, [IP.CANCELLED], []),
    (IP.CANCELLED, K.TOKEN_REQUEST, [IP.CANCELLED], []),
)

ACQUIRER_TABLE = _table(
    (AP.NEW, K.TOKEN_RELEASE, [AP.AWAIT_PAYMENT], [K.PAYMENT_REQUEST]),
    (AP.NEW, K.COMPLETION_NOTICE, [AP.ABORTED], []),
    (AP.AWAIT_PAYMENT, K.TOKEN_RELEASE, [AP.AWAIT_PAYMENT],
     [K.PAYMENT_REQUEST]),
    (AP.AWAIT_PAYMENT, K.SETTLEMENT, [AP.SETTLED], [K.SETTLEMENT]),
    # Funds may already be moving; keep presenting until settled or capped.
    (AP.AWAIT_PAYMENT, K.COMPLETION_NOTICE, [AP.AWAIT_PAYMENT], []),
    (AP.SETTLED, K.SETTLEMENT, [AP.SETTLED], []),
    (AP.SETTLED, K.TOKEN_RELEASE, [AP.SETTLED], []),
    (AP.SETTLED, K.COMPLETION_NOTICE, [AP.SETTLED], []),
    (AP.ABORTED, K.SETTLEMENT, [AP.ABORTED], []),
    (AP.ABORTED, K.TOKEN_RELEASE, [AP.ABORTED], []),
    (AP.ABORTED, K.COMPLETION_NOTICE, [AP.ABORTED], []),
)

ARBITER_TABLE = _table(
    (TP.NEW, K.TRUST_LOOKUP, [TP.QUOTED], [K.TRUST_REPLY]),
    (TP.NEW, K.ESCROW_DEPOSIT, [TP.NEW], []),
    (TP.QUOTED, K.ESCROW_DEPOSIT, [TP.HELD], [K.TEMP_PAYMENT_ACK]),
    (TP.QUOTED, K.TEMP_PAYMENT_QUERY, [TP.QUOTED], []),
    (TP.QUOTED, K.ABORT_NOTICE, [TP.ABORTED], [K.COMPLETION_NOTICE]),
    (TP.QUOTED, K.TAMPER_REPORT, [TP.QUOTED], []),
    (TP.HELD, K.TEMP_PAYMENT_QUERY, [TP.HELD], [K.TEMP_PAYMENT_ACK]),
    (TP.HELD, K.ESCROW_DEPOSIT, [TP.HELD], []),
    (TP.HELD, K.GOODS_DISPATCH, [TP.DISPATCHED], []),
    (TP.HELD, K.TAMPER_REPORT, [TP.HELD], []),
    (TP.DISPATCHED, K.ACCEPT_GOODS, [TP.RELEASED], [K.TOKEN_RELEASE]),
    (TP.DISPATCHED, K.REJECT_GOODS, [TP.REPLACING], [K.REJECT_GOODS]),
    (TP.DISPATCHED, K.TAMPER_REPORT, [TP.DISPATCHED], []),
    (TP.REPLACING, K.GOODS_DISPATCH, [TP.DISPATCHED], []),
    (TP.REPLACING, K.TAMPER_REPORT, [TP.REPLACING], []),
    (TP.RELEASED, K.COMPLETION_NOTICE, [TP.SETTLED], []),
    (TP.RELEASED, K.TAMPER_REPORT, [TP.QUOTED, TP.ABORTED],
     [K.REGENERATE_REQUEST, K.ESCROW_CANCEL, K.COMPLETION_NOTICE]),
    (TP.SETTLED, K.TAMPER_REPORT, [TP.SETTLED], []),
    (TP.SETTLED, K.COMPLETION_NOTICE, [TP.SETTLED], []),
    (TP.ABORTED, K.COMPLETION_NOTICE, [TP.ABORTED], []),
    (TP.ABORTED, K.TAMPER_REPORT, [TP.ABORTED], []),
    (TP.ABORTED, K.GOODS_DISPATCH, [TP.ABORTED], []),
    (TP.ABORTED, K.ESCROW_DEPOSIT, [TP.ABORTED], []),
    (TP.ABORTED, K.TEMP_PAYMENT_QUERY, [TP.ABORTED], []),
    (TP.ABORTED, K.ACCEPT_GOODS, [TP.ABORTED], []),
    (TP.ABORTED, K.REJECT_GOODS, [TP.ABORTED], []),
    (TP.EXPIRED, K.COMPLETION_NOTICE, [TP.EXPIRED], []),
    (TP.EXPIRED, K.TAMPER_REPORT, [TP.EXPIRED], []),
    (TP.EXPIRED, K.GOODS_DISPATCH, [TP.EXPIRED], []),
    (TP.EXPIRED, K.ESCROW_DEPOSIT, [TP.EXPIRED], []),
    (TP.EXPIRED, K.TEMP_PAYMENT_QUERY, [TP.EXPIRED], []),
    (TP.EXPIRED, K.ACCEPT_GOODS, [TP.EXPIRED], []),
    (TP.EXPIRED, K.REJECT_GOODS, [TP.EXPIRED], []),
    (TP.EXPIRED, K.ABORT_NOTICE, [TP.EXPIRED], []),
)

TRANSITION_TABLES = {
    m.Role.CUSTOMER: CUSTOMER_TABLE,
    m.Role.MERCHANT: MERCHANT_TABLE,
    m.Role.CUSTOMER_BANK: ISSUER_TABLE,
    m.Role.MERCHANT_BANK: ACQUIRER_TABLE,
    m.Role.TTP: ARBITER_TABLE,
}

START_PHASE = {
    m.Role.CUSTOMER: CP.START,
    m.Role.MERCHANT: MP.NEW,
    m.Role.CUSTOMER_BANK: IP.NEW,
    m.Role.MERCHANT_BANK: AP.NEW,
    m.Role.TTP: TP.NEW,
}


def tables_as_json() -> dict:
    """The legality tables in plain data form, for docs and agreement tests."""
    out = {}
    for role, table in TRANSITION_TABLES.items():
        role_map: dict = {}
        for (phase, kind), rule in table.items():
            role_map.setdefault(phase.value, {})[kind.value] = {
                "next": [p.value for p in rule.next],
                "emits": [k.value for k in rule.emits],
            }
        out[role.value] = role_map
    return out


# ---------------------------------------------------------------------------
# Customer decision policy

class Decision(Enum):
    PROCEED = "Proceed"
    ABORT = "Abort"


@dataclass(frozen=True)
class AcceptancePolicy:
    """Trust gate applied before committing to a purchase.  With no minimum
    grade set, unrated merchants are acceptable by default (someone has to
    go first); with a minimum set, unrated merchants are refused unless
    accept_unrated explicitly allows them."""

    min_grade: Grade | None = None
    accept_unrated: bool | None = None

    def allows_unrated(self) -> bool:
        if self.accept_unrated is not None:
            return self.accept_unrated
        return self.min_grade is None


def customer_decide(reply: m.TrustReply, policy: AcceptancePolicy) -> Decision:
    if not reply.rated:
        return Decision.PROCEED if policy.allows_unrated() else Decision.ABORT
    if policy.min_grade is None:
        return Decision.PROCEED
    if Grade[reply.grade] >= policy.min_grade:
        return Decision.PROCEED
    return Decision.ABORT


# ---------------------------------------------------------------------------
# Step plumbing

@dataclass
class StepResult:
    messages: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    violations: list = field(default_factory=list)


@dataclass(frozen=True)
class WellKnown:
    """Directory of the singleton infrastructure entities."""

    ttp: EntityId
    customer_bank: EntityId
    merchant_bank: EntityId


class Entity:
    """Common machinery: signing, signature checking, phase bookkeeping."""

    role: m.Role

    def __init__(self, eid: EntityId, signing_key, certificate: Certificate,
                 directory: dict, root_public: bytes, well_known: WellKnown):
        self.id = eid
        self._key = signing_key
        self.certificate = certificate
        self.directory = directory
        self.root_public = root_public
        self.wk = well_known
        self.phases: dict[str, Enum] = {}

    def phase_of(self, txn) -> Enum:
        return self.phases.get(str(txn), START_PHASE[self.role])

    def _emit(self, kind: MsgKind, receiver: EntityId, txn: TransactionId,
              payload) -> ProtocolMessage:
        msg = ProtocolMessage(kind, self.id, receiver, txn, payload)
        return m.sign_message(msg, self._key)

    def step(self, msg: ProtocolMessage, now: int) -> StepResult:
        result = StepResult()
        sender_cert = self.directory.get(str(msg.sender))
        if sender_cert is None or not m.verify_message(
                msg, sender_cert, self.root_public):
            result.violations.append(
                f"BadSignature:{msg.kind.value}:{msg.sender}->{self.id}")
            return result
        phase = self.phase_of(msg.txn)
        rule = TRANSITION_TABLES[self.role].get((phase, msg.kind))
        if rule is None:
            result.violations.append(
                f"ProtocolViolation:{self.id}:{phase.value}x{msg.kind.value}")
            return result
        new_phase = self.handle(msg, phase, now, result)
        assert new_phase is phase or new_phase in rule.next, \
            (self.id, phase, msg.kind, new_phase)
        assert all(out.kind in rule.emits for out in result.messages), \
            (self.id, phase, msg.kind, [out.kind for out in result.messages])
        self.phases[str(msg.txn)] = new_phase
        return result

    def handle(self, msg, phase, now, result):
        raise NotImplementedError

    # Timer hooks; only entities with internal clocks override these.
    def pending_timers(self) -> list:
        return []

    def fire_timer(self, key: str, now: int) -> StepResult:
        raise KeyError(key)


# ---------------------------------------------------------------------------
# Customer

@dataclass(frozen=True)
class PurchaseIntent:
    merchant: EntityId
    product: str
    quantity: int


@dataclass
class _CustomerTxn:
    intent: PurchaseIntent
    order: OrderInfo | None = None
    merchant_cert: Certificate | None = None


class Customer(Entity):
    role = m.Role.CUSTOMER

    def __init__(self, *args, policy: AcceptancePolicy | None = None,
                 reject_script: list | None = None,
                 reject_probability: float = 0.0,
                 behavior: random.Random | None = None):
        super().__init__(*args)
        self.policy = policy if policy is not None else AcceptancePolicy()
        self._reject_script = list(reject_script or [])
        self._reject_probability = reject_probability
        self._behavior = behavior or random.Random(0)
        self.txns: dict[str, _CustomerTxn] = {}
        self._serial = 0

    def begin_purchase(self, intent: PurchaseIntent) -> StepResult:
        """Kick off the next transaction: browse the merchant's catalog."""
        self._serial += 1
        txn = TransactionId(self.id, self._serial)
        self.txns[str(txn)] = _CustomerTxn(intent)
        self.phases[str(txn)] = CP.AWAIT_OFFER
        browse = self._emit(K.BROWSE, intent.merchant, txn,
                            m.Browse(intent.product, intent.quantity))
        return StepResult(messages=[browse])

    def _reject_verdict(self) -> bool:
        if self._reject_script:
            return bool(self._reject_script.pop(0))
        if self._reject_probability <= 0:
            return False
        return self._behavior.random() < self._reject_probability

    def handle(self, msg, phase, now, result):
        st = self.txns.get(str(msg.txn))
        kind = msg.kind

        if phase in (CP.DONE, CP.ABORTED) or (
                phase == CP.AWAIT_TOKEN and kind == K.GOODS_DISPATCH):
            result.notes.append(f"Stale:{kind.value}:{self.id}")
            return phase

        if kind == K.OFFER:
            order = msg.payload.order
            cert = msg.payload.merchant_cert
            if not crypto.verify_certificate(cert, self.root_public) or \
                    cert.subject != str(msg.sender):
                result.violations.append(f"AuthFailure:Offer:{msg.sender}")
                return phase
            if (order.product != st.intent.product
                    or order.quantity != st.intent.quantity
                    or order.merchant != st.intent.merchant):
                result.violations.append(f"OfferMismatch:{msg.txn}")
                return phase
            st.order = order
            st.merchant_cert = cert
            result.messages.append(self._emit(
                K.TRUST_LOOKUP, self.wk.ttp, msg.txn,
                m.TrustLookup(order.merchant)))
            return CP.AWAIT_TRUST

        if kind == K.TRUST_REPLY:
            if customer_decide(msg.payload, self.policy) is Decision.PROCEED:
                result.messages.append(self._emit(
                    K.TOKEN_REQUEST, self.wk.customer_bank, msg.txn,
                    m.TokenRequest(st.order.total_price, self.certificate,
                                   st.merchant_cert)))
                return CP.AWAIT_TOKEN
            result.notes.append(f"TrustRefusal:{msg.txn}")
            result.messages.append(self._emit(
                K.ABORT_NOTICE, self.wk.ttp, msg.txn,
                m.AbortNotice("trust below policy")))
            return CP.ABORTED

        if kind == K.TOKEN_ISSUED:
            result.messages.append(self._emit(
                K.PURCHASE_CONFIRM, st.order.merchant, msg.txn,
                m.PurchaseConfirm(st.order, self.certificate)))
            result.messages.append(self._emit(
                K.ESCROW_DEPOSIT, self.wk.ttp, msg.txn,
                m.EscrowDeposit(st.order, msg.payload.sealed)))
            return CP.AWAIT_GOODS

        if kind == K.GOODS_DISPATCH:
            if self._reject_verdict():
                result.messages.append(self._emit(
                    K.REJECT_GOODS, self.wk.ttp, msg.txn,
                    m.RejectGoods(st.order.order_number)))
                return CP.AWAIT_GOODS
            result.messages.append(self._emit(
                K.ACCEPT_GOODS, self.wk.ttp, msg.txn,
                m.AcceptGoods(st.order.order_number)))
            return CP.AWAIT_COMPLETION

        if kind == K.REGENERATE_REQUEST:
            result.messages.append(self._emit(
                K.TOKEN_REQUEST, self.wk.customer_bank, msg.txn,
                m.TokenRequest(st.order.total_price, self.certificate,
                               st.merchant_cert)))
            return CP.AWAIT_TOKEN

        if kind == K.COMPLETION_NOTICE:
            if msg.payload.status == "completed":
                if phase is not CP.AWAIT_COMPLETION:
                    result.violations.append(f"EarlyCompletion:{msg.txn}")
                    return phase
                return CP.DONE
            result.notes.append(f"Aborted:{msg.txn}:{msg.payload.reason}")
            if msg.sender != self.wk.ttp:
                # The arbiter still has its deadline armed; relay the
                # bank's refusal so the txn closes now, not at expiry.
                result.messages.append(self._emit(
                    K.ABORT_NOTICE, self.wk.ttp, msg.txn,
                    m.AbortNotice(msg.payload.reason)))
            return CP.ABORTED

        raise AssertionError(f"unhandled {kind} in {phase}")


# ---------------------------------------------------------------------------
# Merchant

class Merchant(Entity):
    role = m.Role.MERCHANT

    def __init__(self, *args, catalog: dict[str, int]):
        super().__init__(*args)
        self.catalog = dict(catalog)
        self.orders: dict[str, OrderInfo] = {}
        self._order_seq = 0

    def handle(self, msg, phase, now, result):
        kind = msg.kind

        if phase is MP.DONE or (phase is MP.ABORTED and
                                kind != K.SETTLEMENT):
            result.notes.append(f"Stale:{kind.value}:{self.id}")
            return phase

        if kind == K.BROWSE:
            price = self.catalog.get(msg.payload.product)
            if price is None:
                result.violations.append(
                    f"UnknownProduct:{msg.payload.product}")
                return phase
            self._order_seq += 1
            order = OrderInfo(
                order_number=f"ORD-{self.id}-{self._order_seq}",
                product=msg.payload.product,
                quantity=msg.payload.quantity,
                unit_price=price,
                total_price=price * msg.payload.quantity,
                merchant=self.id)
            self.orders[str(msg.txn)] = order
            result.messages.append(self._emit(
                K.OFFER, msg.sender, msg.txn,
                m.Offer(order, self.certificate)))
            return MP.AWAIT_CONFIRM

        if kind == K.PURCHASE_CONFIRM:
            cert = msg.payload.customer_cert
            if not crypto.verify_certificate(cert, self.root_public) or \
                    cert.subject != str(msg.sender):
                result.violations.append(
                    f"AuthFailure:PurchaseConfirm:{msg.sender}")
                return phase
            order = self.orders.get(str(msg.txn))
            if order is None or msg.payload.order != order:
                result.violations.append(f"OrderMismatch:{msg.txn}")
                return phase
            result.messages.append(self._emit(
                K.TEMP_PAYMENT_QUERY, self.wk.ttp, msg.txn,
                m.TempPaymentQuery(order.order_number)))
            return MP.AWAIT_ACK

        if kind == K.TEMP_PAYMENT_ACK:
            order = self.orders[str(msg.txn)]
            if msg.payload.amount != order.total_price:
                result.violations.append(
                    f"AckAmountMismatch:{msg.txn}:{msg.payload.amount}")
                return phase
            self._dispatch(order, msg.txn, False, result)
            return MP.AWAIT_CAPTURE

        if kind == K.REJECT_GOODS:
            self._dispatch(self.orders[str(msg.txn)], msg.txn, True, result)
            return MP.AWAIT_CAPTURE

        if kind == K.SETTLEMENT:
            result.messages.append(self._emit(
                K.COMPLETION_NOTICE, self.wk.ttp, msg.txn,
                m.CompletionNotice("completed")))
            return MP.DONE

        if kind == K.COMPLETION_NOTICE:
            result.notes.append(f"Aborted:{msg.txn}:{msg.payload.reason}")
            return MP.ABORTED

        raise AssertionError(f"unhandled {kind} in {phase}")

    def _dispatch(self, order: OrderInfo, txn, replacement: bool, result):
        payload = m.GoodsDispatch(order.order_number, order.product,
                                  order.quantity, replacement)
        result.messages.append(self._emit(
            K.GOODS_DISPATCH, txn.customer, txn, payload))
        result.messages.append(self._emit(
            K.GOODS_DISPATCH, self.wk.ttp, txn, payload))


# ---------------------------------------------------------------------------
# CustomerBank: token issuer, escrow holder, settlement engine

@dataclass
class _Hold:
    customer: str
    amount: int


class CustomerBank(Entity):
    role = m.Role.CUSTOMER_BANK

    def __init__(self, *args, keys: KeyMaterial, mint: TokenMint,
                 accounts: dict[str, int], crypto_rng: ByteStream,
                 account_numbers: dict[str, str] | None = None):
        super().__init__(*args)
        self.keys = keys
        self.mint = mint
        self.accounts = dict(accounts)
        # Private account references; these strings must never ride the wire.
        self.account_numbers = dict(account_numbers or {})
        self.escrow_pool = 0
        self.holds: dict[str, _Hold] = {}
        self.txn_token: dict[str, bytes] = {}
        self.settled_amounts: dict[str, int] = {}
        self.settled_out_total = 0
        self.replay_refusals = 0
        self._rng = crypto_rng

    # -- issuance -----------------------------------------------------------

    def _place_hold(self, txn_key: str, customer: str, amount: int) -> None:
        if self.accounts.get(customer, 0) < amount:
            raise InsufficientFunds(f"{customer} cannot cover {amount}")
        self.accounts[customer] -= amount
        self.escrow_pool += amount
        self.holds[txn_key] = _Hold(customer, amount)

    def _release_hold(self, txn_key: str) -> None:
        hold = self.holds.pop(txn_key, None)
        if hold is not None:
            self.escrow_pool -= hold.amount
            self.accounts[hold.customer] += hold.amount

    def _issue(self, msg, now, result):
        req = msg.payload
        txn_key = str(msg.txn)
        if req.customer_cert.subject != str(msg.sender):
            result.violations.append(f"AuthFailure:TokenRequest:{msg.sender}")
            return self.phase_of(msg.txn)
        if txn_key not in self.holds:
            try:
                self._place_hold(txn_key, str(msg.sender), req.amount)
            except InsufficientFunds:
                result.notes.append(f"InsufficientFunds:{msg.txn}")
                result.messages.append(self._emit(
                    K.COMPLETION_NOTICE, msg.sender, msg.txn,
                    m.CompletionNotice("aborted", "insufficient funds")))
                return IP.CANCELLED
        elif self.holds[txn_key].amount != req.amount:
            result.violations.append(f"HoldAmountMismatch:{msg.txn}")
            return self.phase_of(msg.txn)
        token = self.mint.generate_token(req.amount, req.customer_cert,
                                         req.merchant_cert, now)
        self.txn_token[txn_key] = token.token_id
        sealed = tokens.seal_token(token, self.keys, self._rng)
        result.messages.append(self._emit(
            K.TOKEN_ISSUED, msg.sender, msg.txn, m.TokenIssued(sealed)))
        return IP.ISSUED

    # -- settlement ---------------------------------------------------------

    def settle(self, txn: TransactionId, sealed: SealedToken, now: int,
               result: StepResult):
        """Open the presented token, compare it against the stored duplicate,
        and either move the held funds toward the acquirer or revoke the
        token id and report tampering to the arbiter."""
        txn_key = str(txn)
        try:
            opened = tokens.open_token(sealed, self.keys)
        except tokens.TokenIdDecryptionFailure:
            return self._tamper(txn, "TokenIdDecryptionFailure", result)
        except crypto.DecryptionFailure:
            return self._tamper(txn, "DecryptionFailure", result)

        try:
            duplicate = self.mint.duplicate_of(opened.token_id)
        except tokens.AlreadySettled:
            if self.phase_of(txn) is IP.SETTLED:
                return self._refuse_replay(txn, result)
            # A live txn presenting some other settled id is forgery, not
            # replay of this txn's settlement.
            return self._tamper(txn, "AlreadySettledForeign", result)
        except tokens.RevokedToken:
            return self._tamper(txn, "RevokedToken", result)
        except tokens.UnknownTokenId:
            return self._tamper(txn, "UnknownTokenId", result)

        if self.txn_token.get(txn_key) != opened.token_id:
            return self._tamper(txn, "TokenTxnMismatch", result)
        outcome = tokens.verify_token(opened, duplicate)
        if outcome.verdict is Verdict.TAMPERED:
            detail = ",".join(outcome.mismatched_fields)
            return self._tamper(txn, f"FieldMismatch:{detail}", result)

        self.mint.settle(opened.token_id)
        hold = self.holds.pop(txn_key)
        self.escrow_pool -= hold.amount
        self.settled_out_total += hold.amount
        self.settled_amounts[txn_key] = hold.amount
        result.messages.append(self._emit(
            K.SETTLEMENT, self.wk.merchant_bank, txn,
            m.Settlement(hold.amount)))
        result.messages.append(self._emit(
            K.COMPLETION_NOTICE, txn.customer, txn,
            m.CompletionNotice("completed")))
        return IP.SETTLED

    def _tamper(self, txn, reason: str, result):
        txn_key = str(txn)
        current = self.txn_token.get(txn_key)
        if current is not None:
            self.mint.revoke(current)
        result.notes.append(f"TamperDetected:{txn}:{reason}")
        result.messages.append(self._emit(
            K.TAMPER_REPORT, self.wk.ttp, txn,
            m.TamperReport("tamper", reason)))
        phase = self.phase_of(txn)
        return IP.TAMPER_WAIT if phase in (IP.ISSUED, IP.TAMPER_WAIT) else phase

    def _refuse_replay(self, txn, result):
        self.replay_refusals += 1
        result.notes.append(f"AlreadySettled:{txn}")
        result.messages.append(self._emit(
            K.TAMPER_REPORT, self.wk.ttp, txn,
            m.TamperReport("replay", "AlreadySettled")))
        amount = self.settled_amounts.get(str(txn))
        if amount is not None:
            # Idempotent copy so a lost original cannot strand the payout.
            result.messages.append(self._emit(
                K.SETTLEMENT, self.wk.merchant_bank, txn,
                m.Settlement(amount, duplicate=True)))
        return self.phase_of(txn)

    def handle(self, msg, phase, now, result):
        kind = msg.kind

        if kind == K.TOKEN_REQUEST:
            if phase is IP.CANCELLED:
                result.notes.append(f"Stale:TokenRequest:{msg.txn}")
                return phase
            return self._issue(msg, now, result)

        if kind == K.PAYMENT_REQUEST:
            if phase is IP.SETTLED:
                return self._refuse_replay(msg.txn, result)
            if phase is IP.CANCELLED:
                return self._tamper(msg.txn, "CancelledToken", result)
            return self.settle(msg.txn, msg.payload.sealed, now, result)

        if kind == K.ESCROW_CANCEL:
            if phase in (IP.SETTLED, IP.CANCELLED):
                result.notes.append(f"Stale:EscrowCancel:{msg.txn}")
                return phase
            token_id = self.txn_token.get(str(msg.txn))
            if token_id is not None:
                self.mint.revoke(token_id)
            self._release_hold(str(msg.txn))
            return IP.CANCELLED

        raise AssertionError(f"unhandled {kind} in {phase}")


# ---------------------------------------------------------------------------
# MerchantBank: presents released tokens for payment, credits merchants

@dataclass
class _Pending:
    sealed: SealedToken
    merchant: EntityId
    retries: int = 0
    next_due: int | None = None


class MerchantBank(Entity):
    role = m.Role.MERCHANT_BANK

    def __init__(self, *args, retry_ticks: int = DEFAULT_SETTLE_RETRY_TICKS,
                 retry_cap: int = DEFAULT_SETTLE_RETRY_CAP):
        super().__init__(*args)
        self.accounts: dict[str, int] = {}
        self.credited_in_total = 0
        self.pending: dict[str, _Pending] = {}
        self.retry_ticks = retry_ticks
        self.retry_cap = retry_cap

    def _present(self, txn, now, result):
        p = self.pending[str(txn)]
        p.next_due = now + self.retry_ticks
        result.messages.append(self._emit(
            K.PAYMENT_REQUEST, self.wk.customer_bank, txn,
            m.PaymentRequest(p.sealed, p.merchant)))

    def handle(self, msg, phase, now, result):
        kind = msg.kind
        txn_key = str(msg.txn)

        if kind == K.TOKEN_RELEASE:
            if phase in (AP.SETTLED, AP.ABORTED):
                result.notes.append(f"Stale:TokenRelease:{msg.txn}")
                return phase
            self.pending[txn_key] = _Pending(msg.payload.sealed,
                                             msg.payload.merchant)
            self._present(msg.txn, now, result)
            return AP.AWAIT_PAYMENT

        if kind == K.SETTLEMENT:
            if phase in (AP.SETTLED, AP.ABORTED):
                result.notes.append(f"Stale:Settlement:{msg.txn}")
                return phase
            p = self.pending.pop(txn_key, None)
            if p is None:
                result.violations.append(f"SettlementWithoutRelease:{msg.txn}")
                return phase
            merchant = str(p.merchant)
            self.accounts[merchant] = (self.accounts.get(merchant, 0)
                                       + msg.payload.amount)
            self.credited_in_total += msg.payload.amount
            result.messages.append(self._emit(
                K.SETTLEMENT, p.merchant, msg.txn,
                m.Settlement(msg.payload.amount)))
            return AP.SETTLED

        if kind == K.COMPLETION_NOTICE:
            if phase is AP.AWAIT_PAYMENT:
                # Funds may already have left the issuer; keep presenting.
                result.notes.append(f"RetainPending:{msg.txn}")
                return phase
            if phase is AP.NEW:
                return AP.ABORTED
            result.notes.append(f"Stale:CompletionNotice:{msg.txn}")
            return phase

        raise AssertionError(f"unhandled {kind} in {phase}")

    def pending_timers(self):
        return [(p.next_due, txn_key)
                for txn_key, p in sorted(self.pending.items())
                if p.next_due is not None and p.retries < self.retry_cap]

    def fire_timer(self, txn_key: str, now: int) -> StepResult:
        result = StepResult()
        p = self.pending.get(txn_key)
        if p is None or p.retries >= self.retry_cap:
            return result
        p.retries += 1
        result.notes.append(f"SettleRetry:{txn_key}:{p.retries}")
        self._present(TransactionId.parse(txn_key), now, result)
        return result


# ---------------------------------------------------------------------------
# Ttp: trust directory, escrow arbiter, dispute ledger

@dataclass
class _ArbiterTxn:
    txn: TransactionId
    merchant: EntityId
    amount: int | None = None
    oi_digest: str = ""
    token_digest: str = ""
    product: str = ""
    pending_query: str | None = None
    deposited_ever: bool = False
    regen_count: int = 0
    deadline_at: int | None = None


class Ttp(Entity):
    role = m.Role.TTP

    def __init__(self, *args, deadline_ticks: int = DEFAULT_DEADLINE_TICKS,
                 regenerate_cap: int = DEFAULT_REGENERATE_CAP):
        super().__init__(*args)
        self.ledger = Ledger()
        self.trust: dict[str, TrustRecord] = {}
        self.txns: dict[str, _ArbiterTxn] = {}
        self.deadline_ticks = deadline_ticks
        self.regenerate_cap = regenerate_cap
        self._sealed: dict[str, SealedToken] = {}

    # -- bookkeeping helpers -------------------------------------------------

    def _log(self, st: _ArbiterTxn, tick: int, event: str,
             details: dict | None = None) -> None:
        self.ledger.append(LedgerEntry(
            txn=str(st.txn), tick=tick, actor=str(self.id), event=event,
            token_digest=st.token_digest, oi_digest=st.oi_digest,
            details=details or {}))

    def _arm(self, st: _ArbiterTxn, now: int) -> None:
        st.deadline_at = now + self.deadline_ticks

    def _record(self, st: _ArbiterTxn, disposition: Disposition) -> None:
        record = self.trust.setdefault(str(st.merchant), TrustRecord())
        record_outcome(record, disposition, str(st.txn.customer), st.product)

    def _ack(self, st: _ArbiterTxn, txn, result) -> None:
        result.messages.append(self._emit(
            K.TEMP_PAYMENT_ACK, st.merchant, txn,
            m.TempPaymentAck(st.token_digest, st.amount)))

    # -- named operations ----------------------------------------------------

    def hold_escrow(self, msg, st: _ArbiterTxn, now: int,
                    result: StepResult):
        """Accept a sealed token into escrow.  The arbiter cannot open the
        token; it checks the envelope shape, records digests, and acks any
        merchant query that raced ahead of the deposit."""
        if self.phase_of(msg.txn) is TP.HELD:
            raise DuplicateDeposit(str(msg.txn))
        order = msg.payload.order
        self._sealed[str(msg.txn)] = msg.payload.sealed
        st.amount = order.total_price
        st.product = order.product
        st.oi_digest = m.order_digest(order)
        st.token_digest = m.sealed_digest(msg.payload.sealed)
        st.deposited_ever = True
        self._log(st, now, "Deposit", {"amount": st.amount})
        self._arm(st, now)
        if st.pending_query is not None:
            self._log(st, now, "TempAck", {"amount": st.amount})
            self._ack(st, msg.txn, result)
            st.pending_query = None
        return TP.HELD

    def disposition(self, msg, st: _ArbiterTxn, now: int,
                    result: StepResult):
        """Customer verdict: accept releases the token to the acquirer,
        reject sends the merchant back for a replacement."""
        if msg.kind == K.ACCEPT_GOODS:
            self._record(st, Disposition.ACCEPTED)
            self._log(st, now, "Accept", {})
            self._log(st, now, "Release", {"amount": st.amount})
            self._arm(st, now)
            result.messages.append(self._emit(
                K.TOKEN_RELEASE, self.wk.merchant_bank, msg.txn,
                m.TokenRelease(self._sealed[str(msg.txn)], st.merchant)))
            return TP.RELEASED
        self._record(st, Disposition.REJECTED)
        self._log(st, now, "Reject", {"reason": msg.payload.reason})
        self._arm(st, now)
        result.messages.append(self._emit(
            K.REJECT_GOODS, st.merchant, msg.txn,
            m.RejectGoods(msg.payload.order_number, msg.payload.reason)))
        return TP.REPLACING

    def regenerate_flow(self, msg, st: _ArbiterTxn, now: int,
                        result: StepResult):
        """Tamper report on a released token: drop the escrowed copy, ask
        the customer for a fresh token, rewind to awaiting deposit.  Bounded
        by the regeneration cap, after which the transaction aborts."""
        self._log(st, now, "Tamper", {"reason": msg.payload.reason,
                                      "detail": msg.payload.detail})
        if st.regen_count >= self.regenerate_cap:
            return self._abort(st, now, "regeneration cap exhausted", result)
        st.regen_count += 1
        self._sealed.pop(str(msg.txn), None)
        self._log(st, now, "Regenerate", {"attempt": st.regen_count})
        self._arm(st, now)
        result.messages.append(self._emit(
            K.REGENERATE_REQUEST, st.txn.customer, msg.txn,
            m.RegenerateRequest()))
        return TP.QUOTED

    def _abort(self, st: _ArbiterTxn, now: int, reason: str,
               result: StepResult):
        self._log(st, now, "Abort", {"reason": reason})
        st.deadline_at = None
        result.messages.append(self._emit(
            K.ESCROW_CANCEL, self.wk.customer_bank, st.txn,
            m.EscrowCancel(reason)))
        for target in (st.txn.customer, st.merchant):
            result.messages.append(self._emit(
                K.COMPLETION_NOTICE, target, st.txn,
                m.CompletionNotice("aborted", reason)))
        return TP.ABORTED

    # -- message handling ----------------------------------------------------

    def handle(self, msg, phase, now, result):
        kind = msg.kind
        txn_key = str(msg.txn)
        st = self.txns.get(txn_key)

        if phase in (TP.ABORTED, TP.EXPIRED):
            if kind == K.COMPLETION_NOTICE and phase is TP.EXPIRED:
                # A capture raced past expiry; the ledger records the truth.
                self._log(st, now, "Settled", {"amount": st.amount,
                                               "late": True})
                return phase
            if kind == K.TAMPER_REPORT:
                self._log(st, now, "Tamper", {"reason": msg.payload.reason,
                                              "detail": msg.payload.detail})
                return phase
            result.notes.append(f"Stale:{kind.value}:{msg.txn}")
            return phase

        if kind == K.TRUST_LOOKUP:
            st = _ArbiterTxn(msg.txn, msg.payload.merchant)
            self.txns[txn_key] = st
            self._arm(st, now)
            standing = trust_lookup(self.trust, str(msg.payload.merchant))
            reply = m.TrustReply(standing["rated"],
                                 standing.get("trust_factor"),
                                 standing.get("grade"))
            result.messages.append(self._emit(
                K.TRUST_REPLY, msg.sender, msg.txn, reply))
            return TP.QUOTED

        if st is None:
            result.notes.append(f"UnknownTransaction:{kind.value}:{msg.txn}")
            return phase

        if kind == K.ESCROW_DEPOSIT:
            try:
                return self.hold_escrow(msg, st, now, result)
            except DuplicateDeposit:
                result.notes.append(f"DuplicateDeposit:{msg.txn}")
                return phase

        if kind == K.TEMP_PAYMENT_QUERY:
            if phase is TP.QUOTED:
                st.pending_query = msg.payload.order_number
                return phase
            self._log(st, now, "TempAck", {"amount": st.amount})
            self._ack(st, msg.txn, result)
            return phase

        if kind == K.ABORT_NOTICE:
            self._log(st, now, "Abort", {"reason": msg.payload.reason})
            st.deadline_at = None
            result.messages.append(self._emit(
                K.COMPLETION_NOTICE, st.merchant, msg.txn,
                m.CompletionNotice("aborted", msg.payload.reason)))
            return TP.ABORTED

        if kind == K.GOODS_DISPATCH:
            self._log(st, now, "Dispatch",
                      {"replacement": msg.payload.replacement})
            self._arm(st, now)
            return TP.DISPATCHED

        if kind in (K.ACCEPT_GOODS, K.REJECT_GOODS):
            return self.disposition(msg, st, now, result)

        if kind == K.TAMPER_REPORT:
            # A replay refusal means the token already settled; the bank's
            # duplicate settlement is in flight, so regenerating would fork
            # an extra payment.  Only genuine tamper restarts the token.
            if phase is TP.RELEASED and msg.payload.reason != "replay":
                return self.regenerate_flow(msg, st, now, result)
            self._log(st, now, "Tamper", {"reason": msg.payload.reason,
                                          "detail": msg.payload.detail})
            return phase

        if kind == K.COMPLETION_NOTICE:
            if phase is TP.SETTLED:
                result.notes.append(f"Stale:CompletionNotice:{msg.txn}")
                return phase
            self._log(st, now, "Settled", {"amount": st.amount})
            st.deadline_at = None
            return TP.SETTLED

        raise AssertionError(f"unhandled {kind} in {phase}")

    # -- deadlines -----------------------------------------------------------

    def pending_timers(self):
        return [(st.deadline_at, txn_key)
                for txn_key, st in sorted(self.txns.items())
                if st.deadline_at is not None]

    def fire_timer(self, txn_key: str, now: int) -> StepResult:
        """Deadline expiry: refund via escrow cancellation, notify the
        parties, and count the failure against the merchant if goods money
        was ever on the table."""
        result = StepResult()
        st = self.txns.get(txn_key)
        if st is None or st.deadline_at is None or st.deadline_at > now:
            return result
        phase = self.phases.get(txn_key, TP.NEW)
        st.deadline_at = None
        self._log(st, now, "DeadlineExpired", {"phase": phase.value})
        if st.deposited_ever:
            self._record(st, Disposition.REJECTED)
        result.notes.append(f"DeadlineExpired:{txn_key}")
        result.messages.append(self._emit(
            K.ESCROW_CANCEL, self.wk.customer_bank, st.txn,
            m.EscrowCancel("deadline expired")))
        targets = [st.txn.customer, st.merchant]
        if phase is TP.RELEASED:
            targets.append(self.wk.merchant_bank)
        for target in targets:
            result.messages.append(self._emit(
                K.COMPLETION_NOTICE, target, st.txn,
                m.CompletionNotice("aborted", "deadline expired")))
        self.phases[txn_key] = TP.EXPIRED
        return result
