"""Replicated state machine with two recovery paths.

Each replica keeps its entire protocol state (promises, accepted values,
chosen log, applied prefix, configuration) in an undo-log arena in remote
memory, persisting before every externalized message. When a replica's
compute element dies but its memory survives, the dead member is
reincarnated: a fresh process steals the arena, recovers it, and resumes
under the same member id with the configuration epoch unchanged. The classic
alternative, reconfiguration with state transfer, replaces the member,
ships a full arena image over ToR links, and bumps the epoch.

Member ids are the bootstrap pids and never change; a reincarnated member
runs under a new pid, and peers re-learn the routing from its hello, exactly
as they would re-establish a connection.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .ccheap import Arena, op_recover, parse_header
from .cluster import Cluster
from .computeos import Process
from .monitor import FastFailureHandler
from .units import to_us, us

SLOTS = 32
META_SIZE = 56          # member, epoch, promised round/proposer, applied, app_state, scratch
MEMBERS_SIZE = 8 + 8 * 8
ACCEPTED_ENTRY = 24     # round, proposer, cmd
CHOSEN_ENTRY = 16       # flag, cmd

BEAT_EVERY = us(20)
CHECK_EVERY = us(20)
RETRY_EVERY = us(60)
CLIENT_RETRY = us(150)

CMD_APP = 0
CMD_REINCARNATE = 1
CMD_CONFIG = 2


def app_cmd(value: int) -> int:
    return value & 0xFFFFFFFF


def reincarnate_cmd(member: int, initiator: int) -> int:
    return (CMD_REINCARNATE << 56) | (initiator << 8) | member


def config_cmd(dead: int, new_member: int, rack: int, initiator: int) -> int:
    return ((CMD_CONFIG << 56) | (initiator << 24) | (rack << 16)
            | (new_member << 8) | dead)


def cmd_kind(cmd: int) -> int:
    return cmd >> 56


def fold_state(state: int, cmd: int) -> int:
    return (state * 1_000_003 + cmd + 1) & 0xFFFFFFFFFFFFFFFF


# ------------------------------------------------------------------ messages

@dataclass(frozen=True)
class Ballot:
    round: int
    proposer: int

    def __lt__(self, other):
        return (self.round, self.proposer) < (other.round, other.proposer)

    def __le__(self, other):
        return (self.round, self.proposer) <= (other.round, other.proposer)


@dataclass(frozen=True)
class Prepare:
    epoch: int
    ballot: Ballot
    sender: int


@dataclass(frozen=True)
class Promise:
    epoch: int
    ballot: Ballot
    accepted: tuple   # ((slot, round, proposer, cmd), ...)
    sender: int


@dataclass(frozen=True)
class Accept:
    epoch: int
    ballot: Ballot
    slot: int
    cmd: int
    sender: int


@dataclass(frozen=True)
class AcceptedMsg:
    epoch: int
    ballot: Ballot
    slot: int
    sender: int


@dataclass(frozen=True)
class ChosenMsg:
    epoch: int
    slot: int
    cmd: int
    sender: int


@dataclass(frozen=True)
class LeaderBeat:
    epoch: int
    ballot: Ballot
    sender: int


@dataclass(frozen=True)
class ReplicaBeat:
    epoch: int
    sender: int


@dataclass(frozen=True)
class Hello:
    member: int
    pid: int
    epoch: int


@dataclass(frozen=True)
class HelloAck:
    member: int
    pid: int
    epoch: int
    leader: int


@dataclass(frozen=True)
class ClientPropose:
    value: int
    client_pid: int


@dataclass(frozen=True)
class ChosenAck:
    value: int
    slot: int


@dataclass(frozen=True)
class NotLeader:
    leader: Optional[int]


@dataclass(frozen=True)
class SnapshotMsg:
    epoch: int
    image: bytes
    sender: int


class PaxosReplica(Process):
    def __init__(self, pid, os, workload, member: Optional[int],
                 reincarnated: bool = False):
        super().__init__(pid, os)
        self.workload = workload
        self.member = member
        self.reincarnated = reincarnated
        self.epoch = 1
        self.members: list[int] = list(workload.bootstrap_members)
        self.routing: dict[int, int] = dict(workload.bootstrap_routing)
        self.promised = Ballot(0, 0)
        self.accepted: dict[int, tuple[Ballot, int]] = {}
        self.chosen: dict[int, int] = {}
        self.applied = 0
        self.app_state = 0
        self.leader_member: Optional[int] = (min(workload.bootstrap_members)
                                             if workload.bootstrap_members else None)
        self.is_leader = False
        self.ballot = Ballot(0, member if member is not None else 0)
        self.max_round_seen = 0
        self.p1_promises: Optional[dict] = None
        self.p2 = None                     # {"slot","cmd","acks","client"}
        self.cmd_queue: deque = deque()
        self.proposed_values: set[int] = set()
        self.acked_values: dict[int, int] = {}
        self.last_heard: dict[int, int] = {}
        self.suspect_handled: set[int] = set()
        self.pending_recovery: set[int] = set()
        self.arena: Optional[Arena] = None
        self.addrs: dict[str, int] = {}
        self._busy = False
        self._deferred: deque = deque()
        self.halted = False
        self.signal_handlers["memory-fault"] = self._on_memory_fault
        self.signal_handlers["group-failure-notice"] = self._on_notice
        self.signal_handlers["page-added"] = self._on_page_added

    # ------------------------------------------------------------- lifecycle

    def on_start(self):
        if self.reincarnated:
            return  # wait for the stolen pages
        def allocated(rep):
            if not rep.ok:
                return
            arena = Arena(self.os.cluster.addressing, rep.value, log_pages=1)
            def formatted(_):
                self._init_arena(arena)
            self.os.start_op(self.pid, arena.op_format(), formatted)
        self.os.sys_allocate(self.pid, 4, True, allocated)

    def _init_arena(self, arena: Arena):
        meta = arena.alloc(META_SIZE)
        members_addr = arena.alloc(MEMBERS_SIZE)
        accepted_addr = arena.alloc(SLOTS * ACCEPTED_ENTRY)
        chosen_addr = arena.alloc(SLOTS * CHOSEN_ENTRY)
        self.addrs = {"meta": meta, "members": members_addr,
                      "accepted": accepted_addr, "chosen": chosen_addr}
        writes = [(meta, struct.pack("<6Q", self.member, self.epoch,
                                     0, 0, 0, 0) + b"\0" * 8),
                  (members_addr, self._members_bytes())]
        roots = [(name, addr) for name, addr in sorted(self.addrs.items())]
        def ready(_):
            self.arena = arena
            self._enlist()
            if self.member == self.leader_member:
                self._start_phase1()
        self.os.start_op(self.pid, arena.op_tx(writes, roots=roots), ready)

    def _members_bytes(self) -> bytes:
        out = struct.pack("<Q", len(self.members))
        for m in sorted(self.members):
            out += struct.pack("<Q", m)
        out += b"\0" * (MEMBERS_SIZE - len(out))
        return out

    def _enlist(self):
        """Registrations and timers common to fresh and reincarnated starts."""
        peers = [self.routing[m] for m in self.members
                 if m != self.member and m in self.routing]
        if peers:
            self.os.sys_register_failure_group(self.pid, set(peers))
        if (self.workload.strategy == "reincarnate"
                and self.os.cluster.monitor_enabled):
            monitor = self.os.cluster.racks[self.os.rack].monitor
            if monitor is not None:
                handler = FastFailureHandler(self.pid, (
                    ("provision", {"kind": "paxos-reincarnated"}),
                    ("steal-to-provisioned", None),
                    ("notify", tuple(sorted(peers))),
                ))
                monitor.register_handler(self.pid, handler)
        self.os.set_timer(self.pid, "beat", BEAT_EVERY)
        self.os.set_timer(self.pid, "check", CHECK_EVERY)
        self.os.set_timer(self.pid, "retry", RETRY_EVERY)
        if self.workload.liveness_write_every:
            self.os.set_timer(self.pid, "liveness",
                              self.workload.liveness_write_every)
        now = self.os.sim.now
        for m in self.members:
            self.last_heard.setdefault(m, now)
        self.workload.note_replica_up(self.member, self.pid)

    # --------------------------------------------------- reincarnation arrival

    def _on_page_added(self, sig):
        if not self.reincarnated or self.arena is not None:
            return
        def recovered(result):
            status, arena = result
            if status != "ok":
                self.workload.note_violation("recover-failed", status=status)
                return
            self.addrs = {name: arena.get_root(name)
                          for name in ("meta", "members", "accepted", "chosen")}
            def got_state(raw):
                self._load_state(arena, raw)
            ranges = [(self.addrs["meta"], META_SIZE),
                      (self.addrs["members"], MEMBERS_SIZE),
                      (self.addrs["accepted"], SLOTS * ACCEPTED_ENTRY),
                      (self.addrs["chosen"], SLOTS * CHOSEN_ENTRY)]
            self.os.start_op(self.pid,
                             _bulk_read(ranges, "reincarnate-load"), got_state)
        self.os.start_op(self.pid,
                         op_recover(self.os.cluster.addressing,
                                    list(sig.detail["vaddrs"])), recovered)

    def _load_state(self, arena: Arena, raw: bytes):
        meta = raw[:META_SIZE]
        members_raw = raw[META_SIZE:META_SIZE + MEMBERS_SIZE]
        accepted_raw = raw[META_SIZE + MEMBERS_SIZE:
                           META_SIZE + MEMBERS_SIZE + SLOTS * ACCEPTED_ENTRY]
        chosen_raw = raw[META_SIZE + MEMBERS_SIZE + SLOTS * ACCEPTED_ENTRY:]
        (member, epoch, p_round, p_prop, applied, app_state) = struct.unpack_from("<6Q", meta)
        self.member = member
        self.epoch = epoch
        self.promised = Ballot(p_round, p_prop)
        self.max_round_seen = p_round
        self.applied = applied
        self.app_state = app_state
        (count,) = struct.unpack_from("<Q", members_raw)
        self.members = [struct.unpack_from("<Q", members_raw, 8 + 8 * i)[0]
                        for i in range(count)]
        for slot in range(SLOTS):
            rnd, prop, cmd = struct.unpack_from("<3Q", accepted_raw,
                                                slot * ACCEPTED_ENTRY)
            if rnd:
                self.accepted[slot] = (Ballot(rnd, prop), cmd)
            flag, ccmd = struct.unpack_from("<2Q", chosen_raw,
                                            slot * CHOSEN_ENTRY)
            if flag:
                self.chosen[slot] = ccmd
        self.arena = arena
        self.routing[self.member] = self.pid
        self.leader_member = min(self.members)
        self.ballot = Ballot(0, self.member)
        for slot, (_b, cmd) in self.accepted.items():
            self.proposed_values.add(cmd)
        for slot, cmd in self.chosen.items():
            self.proposed_values.add(cmd)
            if cmd_kind(cmd) == CMD_APP:
                self.acked_values[cmd] = slot
        self.os.sim.trace_record(self.os.element_id, "reincarnated",
                                 member=self.member, pid=self.pid,
                                 epoch=self.epoch, applied=self.applied)
        self._enlist()
        self.workload.note_reincarnation(self.member, self.pid)
        targets = [self.routing[m] for m in self.members if m != self.member]
        targets.append(self.workload.client_pid)
        for target in targets:
            self.os.send_to_process(self.pid, target,
                                    Hello(self.member, self.pid, self.epoch))
        if self.promised.proposer == self.member and self.promised.round > 0:
            # this member was the leader when it died; peers still hold its
            # promise, so it resumes the same ballot and re-drives any
            # accepted-but-unchosen slots (same values, so this is safe)
            self.ballot = self.promised
            self.is_leader = True
            self.leader_member = self.member
            for slot in sorted(self.accepted):
                if slot not in self.chosen:
                    self.cmd_queue.appendleft(
                        ("reprop", slot, self.accepted[slot][1], None))
            self._exec(self._pump)
        elif self.member == min(self.members):
            # it was a follower (or never led); contend normally
            self._start_phase1()

    # ------------------------------------------------------------ serialization

    def _exec(self, thunk):
        if self.halted or self.arena is None:
            return
        if self._busy:
            self._deferred.append(thunk)
        else:
            thunk()

    def _persist(self, writes, then):
        if self._busy:
            # single-writer arena: chain this transaction behind the open one
            self._deferred.append(lambda: self._persist(writes, then))
            return
        self._busy = True
        def done(_):
            self._busy = False
            then()
            while self._deferred and not self._busy and not self.halted:
                self._deferred.popleft()()
        self.os.start_op(self.pid, self.arena.op_tx(writes), done)

    # -------------------------------------------------------- region encoding

    def _meta_promise_write(self):
        return (self.addrs["meta"] + 16,
                struct.pack("<QQ", self.promised.round, self.promised.proposer))

    def _meta_apply_write(self):
        return (self.addrs["meta"] + 32,
                struct.pack("<QQ", self.applied, self.app_state))

    def _meta_epoch_write(self):
        return (self.addrs["meta"] + 8, struct.pack("<Q", self.epoch))

    def _accepted_write(self, slot, ballot, cmd):
        return (self.addrs["accepted"] + slot * ACCEPTED_ENTRY,
                struct.pack("<3Q", ballot.round, ballot.proposer, cmd))

    def _chosen_write(self, slot, cmd):
        return (self.addrs["chosen"] + slot * CHOSEN_ENTRY,
                struct.pack("<2Q", 1, cmd))

    def _members_write(self):
        return (self.addrs["members"], self._members_bytes())

    # ----------------------------------------------------------------- sending

    def _send_member(self, member, msg):
        pid = self.routing.get(member)
        if pid is not None and pid != self.pid:
            self.os.send_to_process(self.pid, pid, msg)

    def _broadcast(self, msg):
        for m in self.members:
            if m != self.member:
                self._send_member(m, msg)

    # ---------------------------------------------------------- message intake

    def on_message(self, payload, src_pid):
        if self.halted or self.arena is None:
            if isinstance(payload, SnapshotMsg):
                pass  # handled by the joiner subclass
            return
        epoch = getattr(payload, "epoch", None)
        if epoch is not None and epoch < self.epoch:
            self.os.sim.trace_record(self.os.element_id, "stale-epoch-dropped",
                                     member=self.member, got=epoch,
                                     have=self.epoch,
                                     msg=type(payload).__name__)
            return
        sender = getattr(payload, "sender", None)
        if sender is not None:
            self.last_heard[sender] = self.os.sim.now
            self.suspect_handled.discard(sender)
        if isinstance(payload, Prepare):
            self._exec(lambda: self._on_prepare(payload))
        elif isinstance(payload, Promise):
            self._exec(lambda: self._on_promise(payload))
        elif isinstance(payload, Accept):
            self._exec(lambda: self._on_accept(payload))
        elif isinstance(payload, AcceptedMsg):
            self._exec(lambda: self._on_accepted(payload))
        elif isinstance(payload, ChosenMsg):
            self._exec(lambda: self._on_chosen(payload.slot, payload.cmd))
        elif isinstance(payload, ClientPropose):
            self._exec(lambda: self._on_client(payload))
        elif isinstance(payload, LeaderBeat):
            if self.promised <= payload.ballot:
                self.leader_member = payload.ballot.proposer
        elif isinstance(payload, Hello):
            self.routing[payload.member] = payload.pid
            self.last_heard[payload.member] = self.os.sim.now
            self.suspect_handled.discard(payload.member)
            self.os.send_to_process(self.pid, payload.pid,
                                    HelloAck(self.member, self.pid, self.epoch,
                                             self.leader_member or -1))
            if self.is_leader:
                self._exec(lambda: self._catch_up(payload.member))
        elif isinstance(payload, HelloAck):
            self.routing[payload.member] = payload.pid
            if payload.leader >= 0 and not self.is_leader:
                self.leader_member = payload.leader

    # ------------------------------------------------------------ acceptor side

    def _preempted_by(self, ballot: Ballot):
        """A strictly higher ballot from elsewhere ends this leadership."""
        if self.is_leader and ballot.proposer != self.member and self.ballot < ballot:
            self.is_leader = False
            self.p2 = None
            self.p1_promises = None
            self.os.sim.trace_record(self.os.element_id, "preempted",
                                     member=self.member, by=ballot.proposer)

    def _on_prepare(self, msg: Prepare):
        self.max_round_seen = max(self.max_round_seen, msg.ballot.round)
        if self.promised <= msg.ballot:
            self._preempted_by(msg.ballot)
            self.promised = msg.ballot
            self.leader_member = msg.ballot.proposer
            accepted = tuple((slot, b.round, b.proposer, cmd)
                             for slot, (b, cmd) in sorted(self.accepted.items()))
            def then():
                self._send_member(msg.sender,
                                  Promise(self.epoch, msg.ballot, accepted,
                                          self.member))
            self._persist([self._meta_promise_write()], then)

    def _on_accept(self, msg: Accept):
        self.max_round_seen = max(self.max_round_seen, msg.ballot.round)
        if self.promised <= msg.ballot:
            self._preempted_by(msg.ballot)
            self.promised = msg.ballot
            self.leader_member = msg.ballot.proposer
            self.accepted[msg.slot] = (msg.ballot, msg.cmd)
            def then():
                self._send_member(msg.sender,
                                  AcceptedMsg(self.epoch, msg.ballot, msg.slot,
                                              self.member))
            self._persist([self._meta_promise_write(),
                           self._accepted_write(msg.slot, msg.ballot, msg.cmd)],
                          then)

    def _on_chosen(self, slot: int, cmd: int):
        if slot in self.chosen:
            return
        self.chosen[slot] = cmd
        self.os.sim.trace_record(self.os.element_id, "chosen", member=self.member,
                                 slot=slot, cmd=cmd)
        self._persist([self._chosen_write(slot, cmd)], self._apply_ready)

    def _apply_ready(self):
        """Apply chosen commands in slot order, one transaction per slot."""
        if self.applied in self.chosen:
            slot = self.applied
            cmd = self.chosen[slot]
            self.applied += 1
            self.app_state = fold_state(self.app_state, cmd)
            extra = []
            if cmd_kind(cmd) == CMD_CONFIG:
                extra = self._apply_config(cmd)
            def then(cmd=cmd):
                self.os.sim.trace_record(self.os.element_id, "applied",
                                         member=self.member, upto=self.applied)
                if cmd_kind(cmd) != CMD_APP:
                    self._control_side_effects(cmd)
                self._apply_ready()
            self._persist([self._meta_apply_write()] + extra, then)

    # ------------------------------------------------------------- leader side

    def _start_phase1(self):
        round_ = max(self.max_round_seen, self.promised.round) + 1
        self.ballot = Ballot(round_, self.member)
        self.max_round_seen = round_
        self.is_leader = False
        self.p1_promises = {}
        self.leader_member = self.member
        def then():
            self.p1_promises[self.member] = tuple(
                (slot, b.round, b.proposer, cmd)
                for slot, (b, cmd) in sorted(self.accepted.items()))
            self._broadcast(Prepare(self.epoch, self.ballot, self.member))
            self._check_phase1()
        self.promised = self.ballot
        self._persist([self._meta_promise_write()], then)

    def _on_promise(self, msg: Promise):
        if self.p1_promises is None or msg.ballot != self.ballot:
            return
        self.p1_promises[msg.sender] = msg.accepted
        self._check_phase1()

    def _check_phase1(self):
        if self.p1_promises is None:
            return
        if len(self.p1_promises) * 2 <= len(self.members):
            return
        merged: dict[int, tuple[Ballot, int]] = {}
        for items in self.p1_promises.values():
            for slot, rnd, prop, cmd in items:
                ballot = Ballot(rnd, prop)
                if slot not in merged or merged[slot][0] < ballot:
                    merged[slot] = (ballot, cmd)
        self.p1_promises = None
        self.is_leader = True
        self.leader_member = self.member
        self.os.sim.trace_record(self.os.element_id, "leader-elected",
                                 member=self.member, round=self.ballot.round)
        for slot in sorted(merged):
            if slot not in self.chosen:
                self.cmd_queue.appendleft(("reprop", slot, merged[slot][1], None))
        for m in sorted(self.pending_recovery):
            self.pending_recovery.discard(m)
            if m in self.members:
                self._recover_member(m, reason="timeout")
        self._pump()

    def _on_client(self, msg: ClientPropose):
        cmd = app_cmd(msg.value)
        if self.member not in self.members:
            # excluded by reconfiguration: refuse without a redirect
            self.os.send_to_process(self.pid, msg.client_pid, NotLeader(None))
            return
        if not self.is_leader:
            self.os.send_to_process(self.pid, msg.client_pid,
                                    NotLeader(self.leader_member))
            return
        if cmd in self.acked_values:
            self.os.send_to_process(self.pid, msg.client_pid,
                                    ChosenAck(msg.value, self.acked_values[cmd]))
            return
        if cmd in self.proposed_values:
            return
        self.proposed_values.add(cmd)
        self.cmd_queue.append(("cmd", None, cmd, msg.client_pid))
        self._pump()

    def _propose_control(self, cmd: int):
        if cmd in self.proposed_values:
            return
        self.proposed_values.add(cmd)
        self.cmd_queue.appendleft(("cmd", None, cmd, None))
        self._pump()

    def _pump(self):
        if not self.is_leader or self.p2 is not None or not self.cmd_queue:
            return
        kind, slot, cmd, client = self.cmd_queue.popleft()
        if slot is None:
            slot = self._next_slot()
        if slot >= SLOTS:
            self.workload.note_violation("slots-exhausted", member=self.member)
            return
        self.p2 = {"slot": slot, "cmd": cmd, "acks": {self.member},
                   "client": client, "ballot": self.ballot}
        self.accepted[slot] = (self.ballot, cmd)
        def then():
            self._broadcast(Accept(self.epoch, self.ballot, slot, cmd,
                                   self.member))
            self._maybe_choose()
        self._persist([self._accepted_write(slot, self.ballot, cmd)], then)

    def _next_slot(self) -> int:
        used = set(self.chosen) | set(self.accepted)
        return max(used) + 1 if used else 0

    def _on_accepted(self, msg: AcceptedMsg):
        p2 = self.p2
        if p2 is None or msg.ballot != p2["ballot"] or msg.slot != p2["slot"]:
            return
        p2["acks"].add(msg.sender)
        self._maybe_choose()

    def _maybe_choose(self):
        p2 = self.p2
        if p2 is None or len(p2["acks"]) * 2 <= len(self.members):
            return
        slot, cmd, client = p2["slot"], p2["cmd"], p2["client"]
        self.p2 = None
        if cmd_kind(cmd) == CMD_APP:
            self.acked_values[cmd] = slot
        def after_choose():
            self._broadcast(ChosenMsg(self.epoch, slot, cmd, self.member))
            if client is not None:
                self.os.send_to_process(self.pid, client,
                                        ChosenAck(cmd & 0xFFFFFFFF, slot))
            self._pump()
        if slot not in self.chosen:
            self.chosen[slot] = cmd
            self.os.sim.trace_record(self.os.element_id, "chosen",
                                     member=self.member, slot=slot, cmd=cmd)
            self._persist([self._chosen_write(slot, cmd)], lambda: (
                after_choose(), self._apply_ready()))
        else:
            after_choose()

    def _catch_up(self, member: int):
        for slot in sorted(self.chosen):
            self._send_member(member, ChosenMsg(self.epoch, slot,
                                                self.chosen[slot], self.member))
        if self.p2 is not None:
            self._send_member(member, Accept(self.epoch, self.p2["ballot"],
                                             self.p2["slot"], self.p2["cmd"],
                                             self.member))

    # ----------------------------------------------------------------- timers

    def on_timer(self, name, data):
        if self.halted or self.arena is None:
            if name in ("beat", "check", "retry", "liveness") and not self.halted:
                self.os.set_timer(self.pid, name, BEAT_EVERY)
            return
        if name == "beat":
            if self.is_leader:
                self._broadcast(LeaderBeat(self.epoch, self.ballot, self.member))
            else:
                self._broadcast(ReplicaBeat(self.epoch, self.member))
            self.os.set_timer(self.pid, "beat", BEAT_EVERY)
        elif name == "check":
            self._check_peers()
            self.os.set_timer(self.pid, "check", CHECK_EVERY)
        elif name == "retry":
            if self.is_leader:
                if self.p2 is not None:
                    self._broadcast(Accept(self.epoch, self.p2["ballot"],
                                           self.p2["slot"], self.p2["cmd"],
                                           self.member))
                    self._maybe_choose()
                else:
                    self._exec(self._pump)
            self.os.set_timer(self.pid, "retry", RETRY_EVERY)
        elif name == "liveness":
            if not self._busy:
                self._exec(lambda: self._persist(
                    [(self.addrs["meta"] + 48,
                      struct.pack("<Q", self.os.sim.now))], lambda: None))
            self.os.set_timer(self.pid, "liveness",
                              self.workload.liveness_write_every)

    def _check_peers(self):
        now = self.os.sim.now
        for m in list(self.members):
            if m == self.member or m in self.suspect_handled:
                continue
            heard = self.last_heard.get(m, now)
            if now - heard <= self.workload.suspicion_timeout:
                continue
            self.suspect_handled.add(m)
            self.os.sim.trace_record(self.os.element_id, "suspect",
                                     member=self.member, suspect=m)
            if m == self.leader_member and not self.is_leader:
                # take over, then replace/reincarnate the dead leader
                self.pending_recovery.add(m)
                if self.p1_promises is None:
                    self._exec(self._start_phase1)
            elif self.is_leader:
                self._recover_member(m, reason="timeout")

    # ------------------------------------------------------------- recovery

    def _recover_member(self, member: int, reason: str,
                        memory_dead: bool = False):
        self.workload.note_recovery_start(self.member, member, reason,
                                          self.os.sim.now)
        if self.workload.strategy == "reincarnate" and not memory_dead:
            self._propose_control(reincarnate_cmd(member, self.member))
        else:
            self._start_config_change(member)

    def _start_config_change(self, dead: int):
        """Provision the joiner first so the chosen command names it."""
        info = self.os.cluster.process_info(self.routing[dead])
        rack = info.rack if info is not None else 0
        def provisioned(rep):
            if not rep.ok:
                return
            new_pid = rep.value
            self.routing[new_pid] = new_pid
            self._exec(lambda: self._propose_control(
                config_cmd(dead, new_pid, rack, self.member)))
        self.os.sys_provision(self.pid, {"kind": "paxos-joiner"}, rack=rack,
                              on_done=provisioned)

    def _apply_config(self, cmd: int):
        """Membership/epoch mutation folded into the apply transaction.

        Two initiators can race to replace the same dead member; the chosen
        log serializes them and the loser's command applies as a no-op."""
        dead = cmd & 0xFF
        new_member = (cmd >> 8) & 0xFF
        if dead not in self.members:
            self.os.sim.trace_record(self.os.element_id, "config-noop",
                                     member=self.member, removed=dead)
            return []
        self.members = sorted(set(self.members) - {dead} | {new_member})
        self.routing.setdefault(new_member, new_member)
        self.epoch += 1
        self.os.sim.trace_record(self.os.element_id, "epoch-change",
                                 member=self.member, epoch=self.epoch,
                                 removed=dead, added=new_member)
        return [self._meta_epoch_write(), self._members_write()]

    def _control_side_effects(self, cmd: int):
        kind = cmd_kind(cmd)
        if kind == CMD_REINCARNATE:
            member = cmd & 0xFF
            initiator = (cmd >> 8) & 0xFF
            if initiator == self.member:
                self._do_reincarnate(member)
        elif kind == CMD_CONFIG:
            initiator = (cmd >> 24) & 0xFF
            new_member = (cmd >> 8) & 0xFF
            if initiator == self.member and new_member in self.members:
                self._send_snapshot(new_member)

    def _do_reincarnate(self, member: int):
        dead_pid = self.routing.get(member)
        info = self.os.cluster.process_info(dead_pid)
        if info is None or info.state == "running":
            return  # already reincarnated (e.g. by the rack monitor)
        dead_element = info.element_id
        rack = info.rack
        def provisioned(rep):
            if not rep.ok:
                return
            new_pid = rep.value
            def stolen(steal_rep):
                if steal_rep.ok:
                    self.os.cluster.fence(dead_element)
            self.os.sys_steal(self.pid, dead_pid, "all", stolen,
                              recipient=new_pid, rack=rack)
        self.os.sys_provision(self.pid, {"kind": "paxos-reincarnated"},
                              rack=rack, on_done=provisioned)

    def _send_snapshot(self, new_member: int):
        """Read the whole arena and ship it over ToR to the joiner."""
        pages = self.arena.pages
        page_size = self.os.cluster.addressing.page_size
        ranges = [(p, page_size) for p in pages]
        def have_image(image):
            self.workload.note_snapshot(len(image))
            self.os.send_to_process(self.pid, self.routing[new_member],
                                    SnapshotMsg(self.epoch, image, self.member),
                                    payload_bytes=len(image))
        self.os.start_op(self.pid, _bulk_read(ranges, "snapshot-read"),
                         have_image)

    # ------------------------------------------------------------- failures

    def _on_memory_fault(self, sig):
        if self.halted:
            return
        self.halted = True
        detail = {"failure": "memory", "member": self.member,
                  "element": sig.detail.get("element", "?")}
        try:
            self.os.sys_notify_group(self.pid, detail)
        except ValueError:
            pass
        self.os.sim.trace_record(self.os.element_id, "replica-halt",
                                 member=self.member, cause="memory-fault")
        self.os.crash_process(self.pid)

    def _on_notice(self, sig):
        detail = sig.detail
        if detail.get("failure") == "memory":
            member = detail.get("member")
            self.workload.note_notice(self.member, detail, self.os.sim.now)
            if member is not None:
                self.suspect_handled.add(member)
                if member == self.leader_member and not self.is_leader:
                    self._exec(self._start_phase1)
                    # the new leader replaces the member once elected
                    self._exec(lambda: self._recover_member(member, "notice",
                                                            memory_dead=True))
                elif self.is_leader:
                    self._exec(lambda: self._recover_member(member, "notice",
                                                            memory_dead=True))
        elif detail.get("failure") == "compute":
            old_pid = detail.get("pid")
            member = next((m for m, p in self.routing.items() if p == old_pid),
                          None)
            if detail.get("steal_ok"):
                # monitor-driven reincarnation: adopt the routing hint early
                if member is not None and detail.get("new_pid"):
                    self.routing[member] = detail["new_pid"]
            elif member is not None:
                # monitor could not steal (memory gone too): replace the member
                self.workload.note_notice(self.member, detail, self.os.sim.now)
                self.suspect_handled.add(member)
                if member == self.leader_member and not self.is_leader:
                    self._exec(self._start_phase1)
                    self._exec(lambda: self._recover_member(member, "notice",
                                                            memory_dead=True))
                elif self.is_leader:
                    self._exec(lambda: self._recover_member(member, "notice",
                                                            memory_dead=True))


def _bulk_read(ranges, ctx):
    data = yield ("r", tuple(ranges), None, ctx)
    return data


class PaxosJoiner(PaxosReplica):
    """Fresh member added by reconfiguration; installs a snapshot image."""

    def __init__(self, pid, os, workload):
        super().__init__(pid, os, workload, member=pid)
        self.joined = False

    def on_start(self):
        pass  # waits for the snapshot

    def on_message(self, payload, src_pid):
        if isinstance(payload, SnapshotMsg) and not self.joined:
            self.joined = True
            self._install(payload)
            return
        super().on_message(payload, src_pid)

    def _install(self, snap: SnapshotMsg):
        addressing = self.os.cluster.addressing
        page_size = addressing.page_size
        image = snap.image
        n_pages, log_pages, _gen, _bump, roots, src_pages = parse_header(
            image[:page_size], addressing)
        src_index = {addressing.page_base(p): i for i, p in enumerate(src_pages)}

        def img_read(vaddr, length):
            page = src_index[addressing.page_base(vaddr)]
            off = addressing.offset(vaddr)
            start = page * page_size + off
            return image[start:start + length]

        meta_raw = img_read(roots["meta"][1], META_SIZE)
        accepted_raw = img_read(roots["accepted"][1], SLOTS * ACCEPTED_ENTRY)
        chosen_raw = img_read(roots["chosen"][1], SLOTS * CHOSEN_ENTRY)
        members_raw = img_read(roots["members"][1], MEMBERS_SIZE)
        (_member, epoch, _pr, _pp, applied, app_state) = struct.unpack_from(
            "<6Q", meta_raw)
        self.epoch = epoch
        self.applied = applied
        self.app_state = app_state
        (count,) = struct.unpack_from("<Q", members_raw)
        self.members = [struct.unpack_from("<Q", members_raw, 8 + 8 * i)[0]
                        for i in range(count)]
        for slot in range(SLOTS):
            rnd, prop, cmd = struct.unpack_from("<3Q", accepted_raw,
                                                slot * ACCEPTED_ENTRY)
            if rnd:
                self.accepted[slot] = (Ballot(rnd, prop), cmd)
            flag, ccmd = struct.unpack_from("<2Q", chosen_raw, slot * CHOSEN_ENTRY)
            if flag:
                self.chosen[slot] = ccmd
        self.leader_member = snap.sender

        def allocated(rep):
            if not rep.ok:
                return
            arena = Arena(addressing, rep.value, log_pages=log_pages)
            def formatted(_):
                self._init_from_state(arena)
            self.os.start_op(self.pid, arena.op_format(), formatted)
        self.os.sys_allocate(self.pid, n_pages, True, allocated)

    def _init_from_state(self, arena: Arena):
        meta = arena.alloc(META_SIZE)
        members_addr = arena.alloc(MEMBERS_SIZE)
        accepted_addr = arena.alloc(SLOTS * ACCEPTED_ENTRY)
        chosen_addr = arena.alloc(SLOTS * CHOSEN_ENTRY)
        self.addrs = {"meta": meta, "members": members_addr,
                      "accepted": accepted_addr, "chosen": chosen_addr}
        accepted_raw = bytearray(SLOTS * ACCEPTED_ENTRY)
        chosen_raw = bytearray(SLOTS * CHOSEN_ENTRY)
        for slot, (ballot, cmd) in self.accepted.items():
            struct.pack_into("<3Q", accepted_raw, slot * ACCEPTED_ENTRY,
                             ballot.round, ballot.proposer, cmd)
        for slot, cmd in self.chosen.items():
            struct.pack_into("<2Q", chosen_raw, slot * CHOSEN_ENTRY, 1, cmd)
        writes = [
            (meta, struct.pack("<6Q", self.member, self.epoch,
                               self.promised.round, self.promised.proposer,
                               self.applied, self.app_state) + b"\0" * 8),
            (members_addr, self._members_bytes()),
            (accepted_addr, bytes(accepted_raw)),
            (chosen_addr, bytes(chosen_raw)),
        ]
        roots = [(name, addr) for name, addr in sorted(self.addrs.items())]
        def ready(_):
            self.arena = arena
            self.os.sim.trace_record(self.os.element_id, "joined",
                                     member=self.member, epoch=self.epoch)
            self._enlist()
            self.workload.note_joined(self.member)
            targets = [self.routing.get(m) for m in self.members
                       if m != self.member and self.routing.get(m)]
            targets.append(self.workload.client_pid)
            for target in targets:
                self.os.send_to_process(self.pid, target,
                                        Hello(self.member, self.pid, self.epoch))
        self.os.start_op(self.pid, arena.op_tx(writes, roots=roots), ready)


class PaxosClient(Process):
    def __init__(self, pid, os, workload, n_commands: int):
        super().__init__(pid, os)
        self.workload = workload
        self.n_commands = n_commands
        self.next_value = 1
        self.acked: list[tuple[int, int]] = []
        self.leader_belief: Optional[int] = None
        self.routing = dict(workload.bootstrap_routing)

    def on_start(self):
        self.leader_belief = min(self.workload.bootstrap_members)
        self._propose()

    def _propose(self):
        if self.next_value > self.n_commands:
            return
        target = self.routing.get(self.leader_belief)
        if target is not None:
            self.os.send_to_process(self.pid, target,
                                    ClientPropose(self.next_value, self.pid))
        self.os.set_timer(self.pid, "client-retry", CLIENT_RETRY,
                          self.next_value)

    def on_message(self, payload, src_pid):
        if isinstance(payload, ChosenAck):
            if payload.value == self.next_value:
                self.acked.append((payload.value, payload.slot))
                self.workload.note_client_ack(payload.value, payload.slot,
                                              self.os.sim.now)
                self.next_value += 1
                if self.next_value > self.n_commands:
                    self.workload.client_done = True
                    self.os.cancel_timer(self.pid, "client-retry")
                else:
                    self._propose()
        elif isinstance(payload, NotLeader):
            if payload.leader is not None and payload.leader != self.leader_belief:
                self.leader_belief = payload.leader
                self._propose()
        elif isinstance(payload, Hello):
            # a member re-appeared under a new pid: reconnect and resend
            self.routing[payload.member] = payload.pid
            if self.next_value <= self.n_commands:
                self.leader_belief = payload.member
                self._propose()

    def on_timer(self, name, value):
        if name == "client-retry" and value == self.next_value <= self.n_commands:
            members = sorted(self.routing)
            if self.leader_belief in members:
                idx = members.index(self.leader_belief)
                self.leader_belief = members[(idx + 1) % len(members)]
            else:
                self.leader_belief = members[0]
            self._propose()


class PaxosWorkload:
    """Builds the racks, replicas, and client; collects metrics."""

    def __init__(self, cluster: Cluster, n_replicas: int = 3,
                 n_commands: int = 3, strategy: str = "reincarnate",
                 liveness_write_every: Optional[int] = None,
                 suspicion_timeout: Optional[int] = None):
        self.cluster = cluster
        self.strategy = strategy
        self.liveness_write_every = liveness_write_every
        from .latency import LinkClass
        self.suspicion_timeout = (suspicion_timeout if suspicion_timeout is not None
                                  else 3 * cluster.sim.rtt(LinkClass.CROSS_RACK_TOR))
        self.client_done = False
        self.recovery_starts: list[dict] = []
        self.notices: list[dict] = []
        self.client_acks: list[dict] = []
        self.snapshot_bytes = 0
        self.reincarnations: list[dict] = []
        self.joins: list[int] = []
        self.violations: list[dict] = []
        self.replica_objects: list[PaxosReplica] = []
        self.bootstrap_members: list[int] = []
        self.bootstrap_routing: dict[int, int] = {}
        cluster.register_factory("paxos-reincarnated", self._reincarnated_factory)
        cluster.register_factory("paxos-joiner", self._joiner_factory)
        replicas = []
        for r in range(n_replicas):
            replicas.append(cluster.spawn(
                r, lambda pid, os: PaxosReplica(pid, os, self, member=None),
                element_id=f"r{r}.c0", start=False))
        self.bootstrap_members = [p.pid for p in replicas]
        self.bootstrap_routing = {p.pid: p.pid for p in replicas}
        for proc in replicas:
            proc.member = proc.pid
            proc.members = list(self.bootstrap_members)
            proc.routing = dict(self.bootstrap_routing)
            proc.leader_member = min(self.bootstrap_members)
            proc.ballot = Ballot(0, proc.member)
            self.replica_objects.append(proc)
        client = cluster.spawn(0, lambda pid, os: PaxosClient(pid, os, self,
                                                              n_commands),
                               element_id="r0.c1", start=False)
        self.client_pid = client.pid
        self.client = client
        cluster.register_group(set(self.bootstrap_members))
        # start everyone now that the member list is final
        from .computeos import StartMsg
        for proc in replicas + [client]:
            cluster.sim.schedule(proc.os.element_id, StartMsg(proc.pid))

    # --------------------------------------------------------------- factories

    def _reincarnated_factory(self, cluster, pid, os, params):
        proc = PaxosReplica(pid, os, self, member=None, reincarnated=True)
        self.replica_objects.append(proc)
        return proc

    def _joiner_factory(self, cluster, pid, os, params):
        proc = PaxosJoiner(pid, os, self)
        self.replica_objects.append(proc)
        return proc

    # ------------------------------------------------------------------ notes

    def note_replica_up(self, member, pid):
        pass

    def note_reincarnation(self, member, pid):
        self.reincarnations.append({"member": member, "pid": pid,
                                    "t": self.cluster.sim.now})

    def note_joined(self, member):
        self.joins.append(member)

    def note_recovery_start(self, by, member, reason, t):
        self.recovery_starts.append({"by": by, "member": member,
                                     "reason": reason, "t": t})

    def note_notice(self, member, detail, t):
        self.notices.append({"member": member, "detail": dict(detail), "t": t})

    def note_client_ack(self, value, slot, t):
        self.client_acks.append({"value": value, "slot": slot, "t": t})

    def note_snapshot(self, n_bytes):
        self.snapshot_bytes += n_bytes

    def note_violation(self, kind, **detail):
        detail["check"] = kind
        self.violations.append(detail)

    # ----------------------------------------------------------------- checks

    def agreement_violations(self) -> list[dict]:
        """No two replicas may ever hold different commands for one slot, and
        every applied prefix must fold to its recorded state."""
        out = []
        per_slot: dict[int, set[int]] = {}
        for replica in self.replica_objects:
            for slot, cmd in replica.chosen.items():
                per_slot.setdefault(slot, set()).add(cmd)
        for slot, values in sorted(per_slot.items()):
            if len(values) > 1:
                out.append({"check": "agreement", "slot": slot,
                            "values": sorted(values)})
        for replica in self.replica_objects:
            state = 0
            ok = True
            for slot in range(replica.applied):
                if slot not in replica.chosen:
                    ok = False
                    break
                state = fold_state(state, replica.chosen[slot])
            if ok and replica.applied and state != replica.app_state:
                out.append({"check": "applied-prefix",
                            "member": replica.member})
        return out

    def epochs(self) -> dict[int, int]:
        """Epoch per member of the current configuration (the highest-epoch
        live replica's view); excluded or dead replicas don't count."""
        live = [r for r in self.replica_objects
                if r.arena is not None and not r.halted
                and self.cluster.process_info(r.pid) is not None
                and self.cluster.process_info(r.pid).state == "running"]
        if not live:
            return {}
        current = max(live, key=lambda r: r.epoch).members
        return {r.member: r.epoch for r in live if r.member in current}

    def metrics(self) -> dict:
        chosen_records = self.cluster.sim.trace.by_kind("chosen")
        return {
            "strategy": self.strategy,
            "client_acks": list(self.client_acks),
            "chosen_events": len(chosen_records),
            "epochs": self.epochs(),
            "snapshot_tor_bytes": self.snapshot_bytes,
            "reincarnations": list(self.reincarnations),
            "recovery_starts": list(self.recovery_starts),
            "notices": list(self.notices),
            "agreement_violations": self.agreement_violations()
            + self.violations,
        }

    def first_chosen_after(self, t: int) -> Optional[int]:
        """Timestamp of the first newly-chosen slot after t (catch-up
        rebroadcasts of earlier slots do not count)."""
        seen_before = {r["slot"] for r in self.cluster.sim.trace.by_kind("chosen")
                       if r["t"] <= t}
        times = [r["t"] for r in self.cluster.sim.trace.by_kind("chosen")
                 if r["t"] > t and r["slot"] not in seen_before]
        return min(times) if times else None
