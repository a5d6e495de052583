"""Party and merchant state machines.

Parties react to three inputs: delivered envelopes (``handle``), the
per-round ``tick`` in which they watch the ledger and enforce their
timeouts, and environment requests (``act``). An environment request that the
current state forbids raises a ``Refused`` error and changes nothing.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable

from . import cns, crypto
from .channel import ChannelState, Phase, update_message
from .contracts import EscRecord, MscRecord, make_channel_id, make_scid, make_sid, sign_record
from .errors import (
    Aborted,
    AlreadyOpen,
    BadSignature,
    ChanforgeError,
    DisputeLimit,
    InsufficientFunds,
    NotOpen,
    Refused,
    UnknownChannel,
)
from .ledger import SignatureSet
from .marketplace import EnergyOffer, MarketRole, negotiate, role_validator
from .messages import Message
from .network import Envelope
from .states import Balances, FundingSource, VersionedState, as_balances, balances_fields, state_fields

if TYPE_CHECKING:
    from .engine import Simulation


def address_of(vkey: bytes) -> str:
    return "addr-" + hashlib.sha256(vkey).hexdigest()[:16]


@dataclass
class Waiting:
    deadline: int  # round
    on_timeout: Callable[[], None]


@dataclass
class PlannedUpdate:
    peer: str
    target: Callable[[Balances, int], Balances]  # (latest balances, own side) -> new balances
    label: str


@dataclass
class OpenRequest:
    peer: str
    amounts: tuple[int, int]
    quantities: tuple[int, int]
    kinds: tuple[str, str]
    t_delta: int
    funding: FundingSource | None = None
    state0: VersionedState | None = None


@dataclass
class EscSession:
    peer: str
    side: int
    key: crypto.KeyPair = field(repr=False)
    scid: str = ""
    peer_vk: bytes = b""
    active: bool = False
    channel: ChannelState | None = None
    closed: list[ChannelState] = field(default_factory=list)
    opening: OpenRequest | None = None
    closing_round: int = -1
    closing_trigger: str = ""
    posted: bool = False
    answered: set[int] = field(default_factory=set)
    peer_notice: list | None = None
    deposits: list[str] = field(default_factory=list)  # escrow ids that may need reclaiming


class Party:
    is_merchant = False

    def __init__(self, sim: "Simulation", name: str, balance: int = 0, role: str = "prosumer"):
        self.sim = sim
        self.name = name  # true identity, kept off the ledger
        self.rng = random.Random(crypto.derive_seed(sim.seed, name))
        self.keys = crypto.gen_keypair(self.rng.randbytes(32))
        self.uutid = "u-" + self.rng.randbytes(8).hex()
        self.address = address_of(self.keys.verification_key)
        self.nonces = crypto.NonceSource(self.rng)
        self.role = MarketRole(role)
        self.initial_balance = balance
        self.waits: dict[tuple, Waiting] = {}
        self.sessions: dict[str, EscSession] = {}
        self.current: dict[str, str] = {}  # peer -> scid of the newest ESC
        self.pending_esc: dict[str, EscSession] = {}
        self.mscs: dict[str, str] = {}  # merchant -> sid
        self.msc_pending: dict[str, dict] = {}
        self.agreements: dict[str, cns.CreditAgreement] = {}
        self.rejections: dict[str, str] = {}
        self.queue: list[PlannedUpdate] = []
        self.credit_merchant: str = ""
        self.accept_esc = True
        self.watch_chain = True  # answer disputes and stale posts seen on the ledger

    # -- plumbing ---------------------------------------------------------

    @property
    def round(self) -> int:
        return self.sim.round

    @property
    def height(self) -> int:
        return self.sim.ledger.height

    @property
    def contracts(self):
        return self.sim.contracts

    def log(self, event: str, /, **details: Any) -> None:
        self.sim.record(event, details, actor=self.uutid)

    def send(self, receiver: str, msg: Message) -> None:
        self.sim.network.send_secure(self.uutid, receiver, msg)

    def wait(self, key: tuple, on_timeout: Callable[[], None], rounds: int | None = None) -> None:
        self.waits[key] = Waiting(self.round + (rounds or self.sim.timeout), on_timeout)

    def done(self, key: tuple) -> bool:
        return self.waits.pop(key, None) is not None

    def abort(self, what: str, reason: str) -> None:
        self.log("abort", what=what, reason=reason)

    def session_for(self, peer: str) -> EscSession:
        scid = self.current.get(peer)
        if scid is None:
            raise NotOpen(f"no ESC with {peer}")
        return self.sessions[scid]

    def channel_with(self, peer: str) -> ChannelState:
        session = self.session_for(peer)
        if session.channel is None:
            raise NotOpen(f"no channel with {peer}")
        return session.channel

    def sid_for(self, peer: str) -> str:
        """The MSC backing this party in an ESC with ``peer``."""
        if not self.mscs:
            raise NotOpen(f"{self.uutid} has no MSC")
        return next(iter(self.mscs.values()))

    def _has_backing(self, peer: str) -> bool:
        try:
            self.sid_for(peer)
        except NotOpen:
            return False
        return True

    def busy(self) -> bool:
        if self.waits or self.queue:
            return True
        return any(
            s.channel is not None and s.channel.pending is not None for s in self.sessions.values()
        )

    # -- dispatch ---------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        msg = env.payload
        handler = getattr(self, "on_" + msg.kind.replace("-", "_"), None)
        self.log("delivered", sender=env.sender, msg_id=env.msg_id, kind=msg.kind, counter=msg.counter)
        if handler is None:
            self.log("rejected", sender=env.sender, kind=msg.kind, code="unexpected")
            return
        try:
            handler(env.sender, msg)
        except ChanforgeError as exc:
            self.log("rejected", sender=env.sender, kind=msg.kind, counter=msg.counter, code=exc.code, error=str(exc))
            if msg.kind == "update":
                self.send(
                    env.sender,
                    Message.make(
                        "update-reject", msg.session, msg.counter, True, scid=msg.get("scid"), code=exc.code
                    ),
                )

    def act(self, action: str, params: dict) -> Any:
        fn = getattr(self, "do_" + action.replace("-", "_"), None)
        if fn is None:
            raise ValueError(f"unknown action {action!r}")
        return fn(**params)

    # -- CNS --------------------------------------------------------------

    def do_cns_apply(self, merchant: str, limit: int, liability: int, docs: str = "") -> None:
        self.credit_merchant = merchant
        self.send(
            merchant,
            Message.make(
                "cns-apply",
                self.uutid,
                0,
                False,
                docs=docs.encode(),
                liability=liability,
                limit=limit,
                identity=self.name,
            ),
        )
        self.wait(("cns", merchant), lambda: self.abort("cns-apply", "timeout"))

    def on_cns_decision(self, sender: str, msg: Message) -> None:
        if not self.done(("cns", sender)):
            return
        if msg["accepted"]:
            agreement = msg["agreement"]
            if not agreement.verify(msg["merchant_vk"]):
                raise BadSignature("agreement not signed by merchant")
            self.agreements[sender] = agreement
            self.log("cns-accepted", merchant=sender, limit=agreement.credit_limit)
        else:
            self.rejections[sender] = msg["reason"]
            self.log("cns-rejected", merchant=sender, reason=msg["reason"])

    # -- MSC (participant side) ---------------------------------------------

    def do_msc_init(self, merchant: str, use_cns: bool = False) -> None:
        if merchant in self.mscs or merchant in self.msc_pending:
            raise AlreadyOpen(f"MSC with {merchant} exists")
        if use_cns and merchant not in self.agreements:
            raise Refused(f"no credit agreement with {merchant}")
        nonce = self.nonces.fresh()
        hstate = crypto.hash_state(["msc-init"], nonce)
        self.msc_pending[merchant] = {"use_cns": use_cns}
        self.send(
            merchant,
            Message.make(
                "msc-init",
                self.uutid,
                0,
                False,
                state="msc-init",
                nonce=nonce,
                hstate=hstate,
                sig=crypto.sign(self.keys, hstate, 0),
                vk=self.keys.verification_key,
                use_cns=use_cns,
                identity=self.name,
            ),
        )
        self.wait(("msc", merchant), lambda: self._msc_abort(merchant, "timeout"))

    def _msc_abort(self, merchant: str, reason: str) -> None:
        self.msc_pending.pop(merchant, None)
        self.waits.pop(("msc", merchant), None)
        self.abort("msc-init", reason)

    def _build_msc(self, merchant: str, pending: dict) -> MscRecord:
        return MscRecord(
            sid=pending["sid"],
            merchant=merchant,
            participant=self.uutid,
            merchant_vk=pending["merchant_vk"],
            participant_vk=self.keys.verification_key,
            use_cns=pending["use_cns"],
            collateral_ref=pending.get("collateral_ref", ""),
            collateral_amount=pending.get("collateral_amount", 0),
            collateral_unlock=pending.get("collateral_unlock", 0),
            collateral_sig=pending.get("collateral_sig", b""),
            credit_limit=pending.get("credit_limit", 0),
            current_balances=(0, pending.get("collateral_amount", 0)),
        )

    def on_msc_offer(self, sender: str, msg: Message) -> None:
        pending = self.msc_pending.get(sender)
        if pending is None or not self.done(("msc", sender)):
            return
        pending["sid"] = msg["sid"]
        pending["merchant_vk"] = msg["merchant_vk"]
        if not pending["use_cns"]:
            self._commit_msc(sender, pending, msg["record_sig"])
            return
        agreement = self.agreements[sender]
        try:
            escrow, credential = cns.deposit_collateral(
                agreement, self.sim.ledger, self.address, msg["merchant_address"], self.rng
            )
        except InsufficientFunds as exc:
            self._msc_abort(sender, exc.code)
            return
        pending.update(
            collateral_ref=escrow.id,
            collateral_amount=escrow.amount,
            collateral_unlock=escrow.unlock_height,
            credit_limit=agreement.credit_limit,
        )
        self.send(
            sender,
            Message.make(
                "collateral-credential",
                pending["sid"],
                1,
                False,
                escrow_id=escrow.id,
                claim_secret=credential.claim_secret,
                unlock_height=credential.unlock_height,
            ),
        )
        self.wait(("msc", sender), lambda: self._msc_abort(sender, "timeout"))

    def on_msc_accept(self, sender: str, msg: Message) -> None:
        pending = self.msc_pending.get(sender)
        if pending is None or not self.done(("msc", sender)):
            return
        dgst = cns.collateral_digest(
            pending["collateral_ref"],
            pending["collateral_amount"],
            pending["collateral_unlock"],
            self.sim.ledger.escrow(pending["collateral_ref"]).credential_digest,
        )
        if not crypto.verify(pending["merchant_vk"], dgst, 0, msg["collateral_sig"]):
            self._msc_abort(sender, "bad-signature")
            return
        pending["collateral_sig"] = msg["collateral_sig"]
        self._commit_msc(sender, pending, msg["record_sig"])

    def _commit_msc(self, merchant: str, pending: dict, record_sig: bytes) -> None:
        record = self._build_msc(merchant, pending)
        dgst = record.digest()
        if not crypto.verify(pending["merchant_vk"], dgst, 0, record_sig):
            self._msc_abort(merchant, "bad-signature")
            return
        sigs = SignatureSet(
            "create",
            dgst,
            0,
            (
                (merchant, pending["merchant_vk"], record_sig),
                (self.uutid, self.keys.verification_key, crypto.sign(self.keys, dgst, 0)),
            ),
        )
        try:
            self.contracts.create_msc(record, sigs)
        except ChanforgeError as exc:
            self._msc_abort(merchant, exc.code)
            return
        del self.msc_pending[merchant]
        self.mscs[merchant] = record.sid
        if pending["use_cns"]:
            self.credit_merchant = merchant
        self.log("msc-created", sid=record.sid, merchant=merchant, use_cns=pending["use_cns"])
        self.send(merchant, Message.make("msc-done", record.sid, 2, False, sid=record.sid))

    def on_msc_abort(self, sender: str, msg: Message) -> None:
        if sender in self.msc_pending:
            self._msc_abort(sender, msg.get("reason", "refused"))

    # -- ESC --------------------------------------------------------------

    def _collateral_notice(self) -> list:
        merchant = self.credit_merchant
        if not merchant or merchant not in self.mscs:
            return []
        msc = self.contracts.read_msc(self.mscs[merchant])
        if not msc.use_cns:
            return []
        return [
            merchant,
            msc.merchant_vk,
            msc.sid,
            msc.collateral_ref,
            msc.collateral_amount,
            msc.collateral_unlock,
            msc.collateral_sig,
        ]

    def _check_notice(self, notice) -> bool:
        if not notice:
            return True
        if not self.sim.policy.verify_collateral_sig:
            return True
        merchant, merchant_vk, sid, ref, amount, unlock, sig = notice
        escrow = self.sim.ledger.escrow(ref)
        dgst = cns.collateral_digest(ref, amount, unlock, escrow.credential_digest)
        return crypto.verify(merchant_vk, dgst, 0, sig)

    def do_esc_init(self, peer: str) -> None:
        sid = self.sid_for(peer)
        if peer in self.pending_esc:
            raise Refused(f"ESC with {peer} already being set up")
        if self.contracts.blacklisted(peer) or self.contracts.blacklisted(self.uutid):
            raise DisputeLimit(f"blacklisted party in ESC with {peer}")
        key = crypto.gen_keypair(self.rng.randbytes(32))
        session = EscSession(peer, 0, key)
        self.pending_esc[peer] = session
        nonce = self.nonces.fresh()
        hstate = crypto.hash_state(["esc-init", self.uutid, peer, sid], nonce)
        self.send(
            peer,
            Message.make(
                "esc-init",
                self.uutid,
                0,
                False,
                vk=key.verification_key,
                sid=sid,
                nonce=nonce,
                hstate=hstate,
                sig=crypto.sign(key, hstate, 0),
                notice=self._collateral_notice(),
            ),
        )
        self.wait(("esc", peer), lambda: self._esc_abort(peer, "timeout"))

    def _esc_abort(self, peer: str, reason: str) -> None:
        self.pending_esc.pop(peer, None)
        self.waits.pop(("esc", peer), None)
        self.abort("esc-init", reason)

    def on_esc_init(self, sender: str, msg: Message) -> None:
        hstate = crypto.hash_state(["esc-init", sender, self.uutid, msg["sid"]], msg["nonce"])
        if hstate != msg["hstate"] or not crypto.verify(msg["vk"], hstate, 0, msg["sig"]):
            raise BadSignature("esc-init signature")
        refusal = ""
        if not self.accept_esc:
            refusal = "refused"
        elif self.contracts.blacklisted(sender) or self.contracts.blacklisted(self.uutid):
            refusal = DisputeLimit.code
        elif not self._has_backing(sender):
            refusal = NotOpen.code
        elif not self._check_notice(msg["notice"]):
            refusal = BadSignature.code
        if refusal:
            self.log("esc-refused", peer=sender, code=refusal)
            self.send(sender, Message.make("esc-refuse", self.uutid, 0, True, code=refusal))
            return
        key = crypto.gen_keypair(self.rng.randbytes(32))
        n = self.contracts.esc_count(sender, self.uutid)
        scid = make_scid(sender, self.uutid, n)
        own_sid = self.sid_for(sender)
        record = EscRecord(scid, n, (sender, self.uutid), (msg["vk"], key.verification_key), (msg["sid"], own_sid))
        session = EscSession(sender, 1, key, scid, msg["vk"], peer_notice=msg["notice"] or None)
        self.pending_esc[sender] = session
        self.send(
            sender,
            Message.make(
                "esc-accept",
                scid,
                0,
                True,
                n=n,
                vk=key.verification_key,
                sid=own_sid,
                record_sig=crypto.sign(key, record.digest(), 0),
                notice=self._collateral_notice(),
            ),
        )
        self.wait(("esc", sender), lambda: self._esc_abort(sender, "timeout"), rounds=2 * self.sim.timeout)

    def on_esc_refuse(self, sender: str, msg: Message) -> None:
        if sender in self.pending_esc:
            self._esc_abort(sender, msg.get("code", "refused"))

    def on_esc_accept(self, sender: str, msg: Message) -> None:
        session = self.pending_esc.get(sender)
        if session is None or session.side != 0 or not self.done(("esc", sender)):
            return
        if not self._check_notice(msg["notice"]):
            self._esc_abort(sender, BadSignature.code)
            return
        scid = msg.session
        record = EscRecord(
            scid,
            msg["n"],
            (self.uutid, sender),
            (session.key.verification_key, msg["vk"]),
            (self.sid_for(sender), msg["sid"]),
        )
        dgst = record.digest()
        sigs = SignatureSet(
            "create",
            dgst,
            0,
            (
                (self.uutid, session.key.verification_key, crypto.sign(session.key, dgst, 0)),
                (sender, msg["vk"], msg["record_sig"]),
            ),
        )
        try:
            self.contracts.create_esc(record, sigs)
            self.contracts.link_esc(record.sids[0], scid, self.uutid, self.keys)
        except ChanforgeError as exc:
            self._esc_abort(sender, exc.code)
            return
        session.scid = scid
        session.peer_vk = msg["vk"]
        session.peer_notice = msg["notice"] or None
        self._esc_ready(sender, session)
        self.send(sender, Message.make("esc-done", scid, 1, False))

    def _esc_ready(self, peer: str, session: EscSession) -> None:
        session.active = True
        self.pending_esc.pop(peer, None)
        self.sessions[session.scid] = session
        self.current[peer] = session.scid
        self.log("esc-created", scid=session.scid, peer=peer, side=session.side)

    def on_esc_done(self, sender: str, msg: Message) -> None:
        self._esc_confirm(sender)

    def _esc_confirm(self, peer: str) -> None:
        session = self.pending_esc.get(peer)
        if session is None or session.side != 1 or not self.contracts.ledger.has_contract(session.scid):
            return
        self.waits.pop(("esc", peer), None)
        self.contracts.link_esc(self.sid_for(peer), session.scid, self.uutid, self.keys)
        self._esc_ready(peer, session)

    # -- credit notes (participant side) ------------------------------------

    def _request_note(self, scid: str, amount: int, then: Callable[[str], None], fail: Callable[[str], None]) -> None:
        merchant = self.credit_merchant
        if not merchant or merchant not in self.mscs:
            fail(NotOpen.code)
            return
        self._note_callbacks = getattr(self, "_note_callbacks", {})
        self._note_callbacks[scid] = (then, fail)
        self.send(
            merchant,
            Message.make("note-request", self.mscs[merchant], 0, False, scid=scid, amount=amount),
        )
        self.wait(("note", scid), lambda: self._note_done(scid, None, "timeout"))

    def _note_done(self, scid: str, note_id: str | None, code: str) -> None:
        self.waits.pop(("note", scid), None)
        callbacks = getattr(self, "_note_callbacks", {}).pop(scid, None)
        if callbacks is None:
            return
        then, fail = callbacks
        if note_id is None:
            fail(code)
        else:
            then(note_id)

    def on_note_issued(self, sender: str, msg: Message) -> None:
        self._note_done(msg["scid"], msg["note_id"], "")

    def on_note_refused(self, sender: str, msg: Message) -> None:
        self.log("note-refused", scid=msg["scid"], code=msg["code"])
        self._note_done(msg["scid"], None, msg["code"])

    # -- channel open -------------------------------------------------------

    def _new_endpoint(self, session: EscSession, channel_id: str, t_delta: int, funding) -> ChannelState:
        esc = self.contracts.peek_esc(session.scid)
        endpoint = ChannelState(
            channel_id=channel_id,
            scid=session.scid,
            side=session.side,
            parties=esc.parties,
            vkeys=esc.vkeys,
            key=session.key,
            nonces=self.nonces,
            t_delta=t_delta,
            funding=funding,
        )
        if self.sim.mode == "marketplace":
            roles = self.sim.roles_of(esc.parties)
            endpoint.validators.append(role_validator(roles))
        return endpoint

    def _check_can_open(self, session: EscSession) -> EscRecord:
        if session.channel is not None and session.channel.phase != Phase.CLOSED:
            raise AlreadyOpen(f"channel {session.channel.channel_id} is {session.channel.phase.value}")
        if session.opening is not None:
            raise AlreadyOpen(f"channel with {session.peer} is being opened")
        esc = self.contracts.peek_esc(session.scid)
        if esc.open_channels():
            raise AlreadyOpen(f"{session.scid} has an open channel")
        if len(esc.dispute_list) >= self.contracts.policy.open_limit:
            raise DisputeLimit(f"{session.scid} has {len(esc.dispute_list)} disputes")
        if any(self.contracts.blacklisted(p) for p in esc.parties):
            raise DisputeLimit(f"blacklisted party in {session.scid}")
        return esc

    def do_open(
        self,
        peer: str,
        amounts: list[int],
        quantities: list[int] | None = None,
        funding: list[str] | None = None,
        t_delta: int | None = None,
    ) -> None:
        """Open a channel; ``amounts`` etc. are (own side, peer side)."""
        session = self.session_for(peer)
        self._check_can_open(session)
        quantities = quantities or [0, 0]
        funding = funding or ["deposit", "deposit"]
        t_delta = t_delta or self.sim.t_delta
        if funding[0] == "deposit" and self.sim.ledger.balance(self.address) < amounts[0]:
            raise InsufficientFunds(f"{self.address} cannot deposit {amounts[0]}")
        request = OpenRequest(peer, (amounts[0], amounts[1]), (quantities[0], quantities[1]), (funding[0], funding[1]), t_delta)
        session.opening = request
        if funding[0] == "credit-note":
            self._request_note(
                session.scid,
                amounts[0],
                lambda note_id: self._send_channel_init(session, note_id),
                lambda code: self._open_failed(session, code),
            )
        else:
            self._send_channel_init(session, "")

    def _open_failed(self, session: EscSession, code: str) -> None:
        session.opening = None
        self.waits.pop(("open", session.scid), None)
        self.abort("open", code)

    def _send_channel_init(self, session: EscSession, note_id: str) -> None:
        request = session.opening
        if request is None:
            return
        esc = self.contracts.peek_esc(session.scid)
        channel_id = make_channel_id(session.scid, len(esc.channel_set))
        me, other = session.side, 1 - session.side
        bal = [None, None]
        bal[me] = (request.amounts[0], request.quantities[0])
        bal[other] = (request.amounts[1], request.quantities[1])
        balances = as_balances(bal)
        if request.kinds[0] == "credit-note":
            request.funding = FundingSource("credit-note", note_id, request.amounts[0], self.address, request.quantities[0])
        funding = [None, None]
        funding[me] = request.funding
        endpoint = self._new_endpoint(session, channel_id, request.t_delta, tuple(funding))
        state0 = endpoint.make_state(0, balances)
        request.state0 = state0
        session.channel = endpoint
        self.send(
            session.peer,
            Message.make(
                "channel-init",
                channel_id,
                0,
                False,
                scid=session.scid,
                command="open",
                hstate=state0.hstate,
                state=state0.state_fields(),
                nonce=state0.nonce,
                balances=balances,
                sig=state0.sigs[me],
                amount=[request.kinds[0], request.amounts[0], self.address],
                t_delta=request.t_delta,
                peer_funding=request.kinds[1],
            ),
        )
        self.wait(("open", session.scid), lambda: self._open_timeout(session))

    def _open_timeout(self, session: EscSession) -> None:
        if session.channel is not None and session.channel.phase == Phase.INIT:
            session.channel = None
        self._open_failed(session, "timeout")

    def on_channel_init(self, sender: str, msg: Message) -> None:
        scid = msg["scid"]
        session = self.sessions.get(scid)
        if session is None or session.peer != sender:
            raise UnknownChannel(f"no ESC {scid} with {sender}")
        try:
            self._check_can_open(session)
            if msg.session != make_channel_id(scid, len(self.contracts.peek_esc(scid).channel_set)):
                raise UnknownChannel(f"unexpected channel id {msg.session}")
        except Refused as exc:
            self.log("refused", action="channel-init", code=exc.code)
            self.send(sender, Message.make("channel-refuse", msg.session, 0, True, scid=scid, code=exc.code))
            return
        balances = as_balances(msg["balances"])
        sigs = [b"", b""]
        sigs[1 - session.side] = msg["sig"]
        state0 = VersionedState(scid, msg.session, 0, balances, msg["nonce"], msg["hstate"], (sigs[0], sigs[1]))
        peer_side = 1 - session.side
        if msg["state"] != state_fields(scid, msg.session, 0, balances) or not state0.signed_by(
            peer_side, session.peer_vk
        ) or state0.recompute() != state0.hstate:
            raise BadSignature("channel-init state")
        kind, amount, owner = msg["amount"]
        if amount != balances[peer_side][0]:
            raise BadSignature("channel-init amount does not match state")
        my_amount, my_q = balances[session.side]
        request = OpenRequest(sender, (my_amount, amount), (my_q, balances[peer_side][1]), (msg["peer_funding"], kind), msg["t_delta"])
        request.state0 = state0
        session.opening = request
        peer_funding = FundingSource(kind, "", amount, owner, balances[peer_side][1])

        def accept(funding: FundingSource) -> None:
            request.funding = funding
            fund = [None, None]
            fund[session.side] = funding
            fund[peer_side] = peer_funding
            endpoint = self._new_endpoint(session, msg.session, request.t_delta, tuple(fund))
            try:
                cosigned = endpoint.countersign(state0)
            except ChanforgeError as exc:
                self._refuse_open(session, msg, exc.code)
                return
            request.state0 = cosigned
            session.channel = endpoint
            self.send(
                sender,
                Message.make("channel-accept", msg.session, 0, True, scid=scid, state=cosigned, funding=funding),
            )
            self.wait(("open", scid), lambda: self._open_timeout(session), rounds=2 * self.sim.timeout)

        if request.kinds[0] == "credit-note":
            self._request_note(
                scid,
                my_amount,
                lambda note_id: accept(FundingSource("credit-note", note_id, my_amount, self.address, my_q)),
                lambda code: self._refuse_open(session, msg, code),
            )
            return
        try:
            escrow = self.sim.ledger.lock_escrow(self.address, my_amount, self.height + request.t_delta, scid)
        except InsufficientFunds as exc:
            self._refuse_open(session, msg, exc.code)
            return
        session.deposits.append(escrow.id)
        accept(FundingSource("deposit", escrow.id, my_amount, self.address, my_q))

    def _refuse_open(self, session: EscSession, msg: Message, code: str) -> None:
        session.opening = None
        self.log("refused", action="channel-init", code=code)
        self.send(session.peer, Message.make("channel-refuse", msg.session, 0, True, scid=session.scid, code=code))

    def on_channel_refuse(self, sender: str, msg: Message) -> None:
        session = self.sessions.get(msg["scid"])
        if session is None or session.opening is None:
            return
        if session.channel is not None and session.channel.phase == Phase.INIT:
            session.channel = None
        self._open_failed(session, msg.get("code", "refused"))

    def on_channel_accept(self, sender: str, msg: Message) -> None:
        session = self.sessions.get(msg["scid"])
        if session is None or session.opening is None or not self.done(("open", session.scid)):
            return
        request = session.opening
        endpoint = session.channel
        state0 = msg["state"]
        if (
            not isinstance(state0, VersionedState)
            or state0.hstate != request.state0.hstate
            or not state0.is_cosigned(endpoint.vkeys)
        ):
            self._open_failed(session, BadSignature.code)
            raise BadSignature("channel-accept state")
        me = session.side
        if request.kinds[0] == "deposit":
            try:
                escrow = self.sim.ledger.lock_escrow(self.address, request.amounts[0], self.height + request.t_delta, session.scid)
            except InsufficientFunds as exc:
                self._open_failed(session, exc.code)
                return
            session.deposits.append(escrow.id)
            request.funding = FundingSource("deposit", escrow.id, request.amounts[0], self.address, request.quantities[0])
        fund = [None, None]
        fund[me] = request.funding
        fund[1 - me] = msg["funding"]
        endpoint.funding = (fund[0], fund[1])
        try:
            self.contracts.open_channel(session.scid, state0, endpoint.funding, request.t_delta)
        except ChanforgeError as exc:
            self._open_failed(session, exc.code)
            return
        self._activate(session, state0)

    def _activate(self, session: EscSession, state0: VersionedState) -> None:
        endpoint = session.channel
        entry = self.contracts.peek_esc(session.scid).channels[endpoint.channel_id]
        endpoint.funding = entry.funding
        endpoint.activate(state0, entry.open_height)
        session.opening = None
        session.closing_round = -1
        session.posted = False
        session.answered = set()
        self.waits.pop(("open", session.scid), None)
        self.log(
            "channel-active",
            scid=session.scid,
            channel_id=endpoint.channel_id,
            side=session.side,
            parties=list(endpoint.parties),
            vkeys=[v.hex() for v in endpoint.vkeys],
            funding=[f.to_json() for f in endpoint.funding],
            roles=[r.value for r in self.sim.roles_of(endpoint.parties)],
            t_delta=endpoint.t_delta,
            open_height=endpoint.open_height,
        )
        self._log_cosigned(endpoint, state0)

    def _log_cosigned(self, endpoint: ChannelState, state: VersionedState) -> None:
        self.log("cosigned", channel_id=endpoint.channel_id, state=state.to_json())

    # -- updates ------------------------------------------------------------

    def do_pay(self, peer: str, amount: int) -> None:
        def target(balances: Balances, side: int) -> Balances:
            pairs = [list(balances[0]), list(balances[1])]
            pairs[side][0] -= amount
            pairs[1 - side][0] += amount
            return as_balances(pairs)

        self.queue.append(PlannedUpdate(peer, target, f"pay {amount}"))

    def do_update(self, peer: str, balances: list) -> None:
        """Propose explicit balances, given as (own side, peer side) pairs."""

        def target(_: Balances, side: int) -> Balances:
            pairs = [None, None]
            pairs[side] = balances[0]
            pairs[1 - side] = balances[1]
            return as_balances(pairs)

        self.queue.append(PlannedUpdate(peer, target, "update"))

    def do_trade(self, peer: str, quantity: int, unit_price: int, fills: list[int] | None = None, seller: str = "self") -> None:
        """Fill an energy offer; ``seller`` is "self" or "peer"."""
        endpoint = self.channel_with(peer)
        seller_side = endpoint.side if seller == "self" else endpoint.peer_side
        offer = EnergyOffer(endpoint.parties[seller_side], quantity, unit_price, self.height + endpoint.t_delta)
        roles = self.sim.roles_of(endpoint.parties)
        steps = negotiate(endpoint.latest.balances, offer, seller_side, roles, fills, self.height)
        count = len(steps)
        for n in range(count):
            qty = (fills or [quantity])[n]

            def target(balances: Balances, side: int, q=qty) -> Balances:
                from .marketplace import fill

                return fill(balances, seller_side, q, unit_price)

            self.queue.append(PlannedUpdate(peer, target, f"fill {qty}@{unit_price}"))

    def _next_update(self) -> None:
        if not self.queue:
            return
        planned = self.queue[0]
        try:
            endpoint = self.channel_with(planned.peer)
        except Refused as exc:
            session = self.sessions.get(self.current.get(planned.peer, ""))
            if session is not None and session.opening is None:
                # no channel and none on the way: the update has nowhere to go
                self.queue.pop(0)
                self.log("refused", action="update", label=planned.label, code=exc.code)
            return
        if endpoint.phase != Phase.ACTIVE or endpoint.pending is not None:
            return
        session = self.sessions[endpoint.scid]
        if session.closing_round >= 0:
            return
        self.queue.pop(0)
        try:
            new = planned.target(endpoint.latest.balances, endpoint.side)
            msg = endpoint.propose_update(new, self.height, self.round)
        except ChanforgeError as exc:
            self.log("refused", action="update", label=planned.label, code=exc.code)
            return
        self.log("proposed", channel_id=endpoint.channel_id, i=msg.counter, balances=balances_fields(new))
        self.send(planned.peer, msg)

    def _endpoint_for(self, msg: Message) -> ChannelState:
        scid = msg.get("scid")
        session = self.sessions.get(scid) if isinstance(scid, str) else None
        if session is None:
            raise UnknownChannel(f"no channel {msg.session}")
        for endpoint in [session.channel] + session.closed:
            if endpoint is not None and endpoint.channel_id == msg.session:
                return endpoint
        raise UnknownChannel(f"no channel {msg.session}")

    def on_update(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        reply = endpoint.accept_update(msg, self.height)
        self._log_cosigned(endpoint, endpoint.latest)
        self.send(sender, reply)

    def on_update_success(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        state = endpoint.complete_update(msg)
        self._log_cosigned(endpoint, state)

    def on_update_reject(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        endpoint.on_reject(msg)

    # -- disputes -------------------------------------------------------------

    def do_dispute(self, peer: str) -> None:
        endpoint = self.channel_with(peer)
        self._raise_dispute(endpoint)

    def _raise_dispute(self, endpoint: ChannelState) -> None:
        dtx = endpoint.dispute_tx(self.uutid)
        esc = self.contracts.raise_dispute(endpoint.scid, dtx)
        record = esc.dispute_list[esc.channels[endpoint.channel_id].dispute_index]
        endpoint.raise_dispute(record)
        self.log("dispute", channel_id=endpoint.channel_id, disputed_counter=dtx.disputed_counter)

    # -- closing --------------------------------------------------------------

    def do_close(self, peer: str, trigger: str = "trade-complete") -> None:
        endpoint = self.channel_with(peer)
        self._start_close(self.sessions[endpoint.scid], trigger)

    def _start_close(self, session: EscSession, trigger: str) -> None:
        endpoint = session.channel
        msg = endpoint.close_channel(trigger)
        if session.closing_round >= 0:
            raise Refused(f"{endpoint.channel_id} is already closing")
        session.closing_round = self.round
        session.closing_trigger = trigger
        self.send(session.peer, msg)

    def on_finalise(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        reply = endpoint.on_finalise(msg)
        self.send(sender, reply)

    def on_finalise_newer(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        session = self.sessions[endpoint.scid]
        if endpoint.adopt(msg["state"]):
            self._log_cosigned(endpoint, endpoint.latest)
        if endpoint.phase in (Phase.ACTIVE, Phase.DISPUTED) and session.closing_round >= 0:
            session.closing_round = self.round
            self.send(sender, endpoint.close_channel(session.closing_trigger))

    def on_finalise_ack(self, sender: str, msg: Message) -> None:
        endpoint = self._endpoint_for(msg)
        if endpoint.phase == Phase.CLOSED:
            return
        tx = endpoint.finalise_tx(msg)
        self.contracts.apply_channel_result(endpoint.scid, tx)
        self._observe(self.sessions[endpoint.scid])

    # -- chain observation and timers -----------------------------------------

    def tick(self) -> None:
        for key, waiting in sorted(self.waits.items()):
            if self.round >= waiting.deadline and self.waits.get(key) is waiting:
                del self.waits[key]
                waiting.on_timeout()
        for peer in sorted(self.pending_esc):
            self._esc_confirm(peer)
        for scid in sorted(self.sessions):
            self._observe(self.sessions[scid])
        self._next_update()
        self._reclaim()

    def _observe(self, session: EscSession) -> None:
        endpoint = session.channel
        if endpoint is None:
            return
        esc = self.contracts.peek_esc(session.scid)
        entry = esc.channels.get(endpoint.channel_id)
        if endpoint.phase == Phase.INIT:
            if entry is not None and session.opening is not None:
                self._activate(session, session.opening.state0)
            return
        if endpoint.phase == Phase.CLOSED:
            return
        if entry.status == "closed":
            adopted = endpoint.adopt(entry.posted)
            if adopted:
                self._log_cosigned(endpoint, endpoint.latest)
            endpoint.mark_closed()
            session.closed.append(endpoint)
            session.channel = None
            session.closing_round = -1
            self.log(
                "channel-closed",
                channel_id=endpoint.channel_id,
                i=entry.posted.i,
                final=balances_fields(entry.final),
                trigger=entry.trigger,
            )
            return
        if not self.watch_chain:
            return
        if entry.status == "disputed":
            dispute = esc.dispute_list[entry.dispute_index]
            if endpoint.phase != Phase.DISPUTED:
                endpoint.raise_dispute(dispute)
            if (
                dispute.raiser != self.uutid
                and entry.dispute_index not in session.answered
                and endpoint.latest.i >= dispute.disputed_counter
                and self.height < dispute.t_end
            ):
                session.answered.add(entry.dispute_index)
                try:
                    self.contracts.submit_evidence(session.scid, endpoint.channel_id, endpoint.latest)
                    self.log("evidence", channel_id=endpoint.channel_id, i=endpoint.latest.i)
                except ChanforgeError as exc:
                    self.log("rejected", kind="evidence", code=exc.code)
            return
        if endpoint.phase == Phase.DISPUTED:
            before = endpoint.latest.i
            outcome = endpoint.resolve_dispute(entry.posted)
            if endpoint.latest.i > before:
                self._log_cosigned(endpoint, endpoint.latest)
            else:
                endpoint.phase = Phase.ACTIVE
                endpoint.dispute = None
            self.log("dispute-over", channel_id=endpoint.channel_id, outcome=outcome)
        if entry.status == "closing":
            if entry.posted.i > endpoint.latest.i and endpoint.adopt(entry.posted):
                self._log_cosigned(endpoint, endpoint.latest)
            if entry.posted.i < endpoint.latest.i:
                try:
                    self.contracts.post_state(session.scid, endpoint.channel_id, endpoint.latest)
                    self.log("challenge", channel_id=endpoint.channel_id, i=endpoint.latest.i)
                except ChanforgeError as exc:
                    self.log("rejected", kind="challenge", code=exc.code)
            return
        self._timers(session, endpoint)

    def _timers(self, session: EscSession, endpoint: ChannelState) -> None:
        timeout = self.sim.timeout
        if endpoint.phase != Phase.ACTIVE:
            return
        if endpoint.pending is not None and self.round - endpoint.pending_round >= timeout:
            # the peer went quiet on our proposal: put the channel under dispute
            try:
                self._raise_dispute(endpoint)
            except ChanforgeError as exc:
                self.log("rejected", kind="dispute", code=exc.code)
            return
        if session.closing_round >= 0 and self.round - session.closing_round >= timeout and not session.posted:
            session.posted = True
            try:
                self.contracts.post_state(session.scid, endpoint.channel_id, endpoint.latest, session.closing_trigger)
                self.log("unilateral-close", channel_id=endpoint.channel_id, i=endpoint.latest.i)
            except ChanforgeError as exc:
                self.log("rejected", kind="post", code=exc.code)
            return
        if session.closing_round < 0 and self.height >= endpoint.expiry:
            lower = endpoint.parties[endpoint.side] < endpoint.parties[endpoint.peer_side]
            if lower or self.height >= endpoint.expiry + timeout:
                self._start_close(session, "timer-elapsed")

    def _reclaim(self) -> None:
        for session in self.sessions.values():
            for escrow_id in list(session.deposits):
                escrow = self.sim.ledger.escrow(escrow_id)
                if escrow.consumed:
                    session.deposits.remove(escrow_id)
                    continue
                if self.height < escrow.unlock_height:
                    continue
                esc = self.contracts.peek_esc(session.scid)
                if any(f.ref == escrow_id for e in esc.channels.values() for f in e.funding):
                    session.deposits.remove(escrow_id)
                    continue
                if session.opening is not None:
                    continue
                self.contracts.reclaim_deposit(session.scid, escrow_id, self.address)
                session.deposits.remove(escrow_id)
                self.log("reclaimed", escrow_id=escrow_id)


class Merchant(Party):
    is_merchant = True

    def __init__(self, sim: "Simulation", name: str, balance: int = 0, role: str = "distributor",
                 policy: cns.Policy | None = None, period_end: int | None = None):
        super().__init__(sim, name, balance, role)
        self.policy = policy or sim.policy
        self.identity_map: dict[str, str] = {}  # uutid -> true identity, never on-chain
        self.granted: dict[str, cns.CreditAgreement] = {}
        self.clients: dict[str, str] = {}  # participant -> sid
        self.offers: dict[str, dict] = {}
        self.claim_secrets: dict[str, bytes] = {}
        self.period_end = period_end if period_end is not None else self.policy.period_length
        self.auto_settle = False
        self.reports: list[cns.SettlementReport] = []

    def sid_for(self, peer: str) -> str:
        if peer in self.clients:
            return self.clients[peer]
        return super().sid_for(peer)

    def on_cns_apply(self, sender: str, msg: Message) -> None:
        self.identity_map[sender] = msg["identity"]
        app = cns.CreditApplication(sender, self.uutid, msg["docs"], msg["liability"], msg["limit"])
        decision = cns.review_application(
            self.keys, app, self.policy, self.contracts.disputes_raised(sender), self.height
        )
        if isinstance(decision, cns.Rejection):
            self.log("cns-review", applicant=sender, outcome=decision.reason)
            reply = Message.make("cns-decision", sender, 0, True, accepted=False, reason=decision.reason)
        else:
            self.granted[sender] = decision
            self.log("cns-review", applicant=sender, outcome="accepted", limit=decision.credit_limit)
            reply = Message.make(
                "cns-decision",
                sender,
                0,
                True,
                accepted=True,
                agreement=decision,
                merchant_vk=self.keys.verification_key,
            )
        self.send(sender, reply)

    def _record_for(self, participant: str, offer: dict) -> MscRecord:
        return MscRecord(
            sid=offer["sid"],
            merchant=self.uutid,
            participant=participant,
            merchant_vk=self.keys.verification_key,
            participant_vk=offer["vk"],
            use_cns=offer["use_cns"],
            collateral_ref=offer.get("collateral_ref", ""),
            collateral_amount=offer.get("collateral_amount", 0),
            collateral_unlock=offer.get("collateral_unlock", 0),
            collateral_sig=offer.get("collateral_sig", b""),
            credit_limit=offer.get("credit_limit", 0),
            current_balances=(0, offer.get("collateral_amount", 0)),
        )

    def on_msc_init(self, sender: str, msg: Message) -> None:
        if msg["hstate"] != crypto.hash_state(["msc-init"], msg["nonce"]) or not crypto.verify(
            msg["vk"], msg["hstate"], 0, msg["sig"]
        ):
            raise BadSignature("msc-init signature")
        use_cns = bool(msg["use_cns"])
        if use_cns and sender not in self.granted:
            self.send(sender, Message.make("msc-abort", self.uutid, 0, True, reason="no-agreement"))
            return
        self.identity_map[sender] = msg["identity"]
        sid = make_sid(self.uutid, sender, self.contracts.msc_count(self.uutid, sender))
        offer = {"sid": sid, "vk": msg["vk"], "use_cns": use_cns}
        self.offers[sender] = offer
        fields = dict(sid=sid, merchant_vk=self.keys.verification_key, merchant_address=self.address)
        if use_cns:
            agreement = self.granted[sender]
            fields.update(limit=agreement.credit_limit, collateral=agreement.required_collateral)
            offer["credit_limit"] = agreement.credit_limit
        else:
            record = self._record_for(sender, offer)
            fields["record_sig"] = crypto.sign(self.keys, record.digest(), 0)
        self.send(sender, Message.make("msc-offer", sid, 0, True, **fields))

    def on_collateral_credential(self, sender: str, msg: Message) -> None:
        offer = self.offers.get(sender)
        if offer is None or offer["sid"] != msg.session:
            raise UnknownChannel(f"no pending MSC {msg.session}")
        escrow = cns.check_collateral(
            self.sim.ledger, self.granted[sender], msg["escrow_id"], msg["claim_secret"], self.address
        )
        self.claim_secrets[escrow.id] = msg["claim_secret"]
        collateral_sig = crypto.sign(
            self.keys,
            cns.collateral_digest(escrow.id, escrow.amount, escrow.unlock_height, escrow.credential_digest),
            0,
        )
        offer.update(
            collateral_ref=escrow.id,
            collateral_amount=escrow.amount,
            collateral_unlock=escrow.unlock_height,
            collateral_sig=collateral_sig,
        )
        record = self._record_for(sender, offer)
        self.send(
            sender,
            Message.make(
                "msc-accept",
                offer["sid"],
                1,
                True,
                collateral_sig=collateral_sig,
                record_sig=crypto.sign(self.keys, record.digest(), 0),
            ),
        )

    def on_msc_done(self, sender: str, msg: Message) -> None:
        offer = self.offers.get(sender)
        if offer is None or not self.sim.ledger.has_contract(offer["sid"]):
            raise UnknownChannel(f"MSC {msg.session} not on the ledger")
        self.clients[sender] = offer["sid"]
        del self.offers[sender]

    def on_note_request(self, sender: str, msg: Message) -> None:
        sid = self.clients.get(sender)
        if sid is None or sid != msg.session:
            raise UnknownChannel(f"no MSC {msg.session} with {sender}")
        try:
            note = cns.issue_credit_note(self.contracts, sid, self.keys, msg["scid"], msg["amount"])
        except ChanforgeError as exc:
            self.log("note-refused", sid=sid, code=exc.code)
            self.send(sender, Message.make("note-refused", sid, 0, True, scid=msg["scid"], code=exc.code))
            return
        self.log("note-issued", sid=sid, note_id=note.note_id, amount=note.amount)
        self.send(sender, Message.make("note-issued", sid, 0, True, scid=msg["scid"], note_id=note.note_id))

    def do_settle(self) -> cns.SettlementReport:
        report = cns.settle_period(
            self.contracts,
            self.keys,
            self.address,
            sorted(self.clients.values()),
            self.claim_secrets,
            self.period_end,
            self.policy,
        )
        self.reports.append(report)
        self.log("settled", report=report.to_json())
        return report

    def tick(self) -> None:
        super().tick()
        for sid in sorted(self.clients.values()):
            msc = self.contracts.read_msc(sid)
            if any(n.status == "closed" for n in msc.debit_ledger):
                cns.recalculate(self.contracts, sid, self.keys)
        if self.auto_settle and not self.reports and self.height >= self.period_end:
            try:
                self.do_settle()
            except ChanforgeError:
                pass
