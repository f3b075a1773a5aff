"""Synthetic enterprise authentication logs with planted peer groups and reconnaissance spikes.

Per user, hour and method the number of distinct targets is drawn from
Poisson(lambda[g, h, d] * psi[m, g]); lambda is a step profile (work vs off
hours) and psi a per-group method effect drawn around a shared method mean.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Iterable, TextIO

import numpy as np

from .distributions import RngStream
from .ingest import day_of_week, format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

METHODS = ("kerberos", "ntlm")

# (work hours, work days [1 = Sunday], off-hour rate)
SCHEDULES = [
    (range(9, 17), (2, 3, 4, 5, 6), 0.15),
    (range(6, 14), (2, 3, 4, 5, 6), 0.10),
    (range(12, 20), (2, 3, 4, 5, 6), 0.20),
    ((22, 23, 0, 1, 2, 3, 4, 5), (1, 2, 3, 4, 5, 6, 7), 0.10),
    (range(8, 20), (1, 2, 7), 0.05),
    (range(8, 18), (2, 3, 4, 5, 6, 7), 0.10),
    (range(10, 19), (2, 3, 4, 5, 6), 0.30),
    (range(7, 16), (2, 3, 4, 5), 0.20),
]


@dataclass
class GroupProfile:
    work_hours: list[int]
    work_days: list[int]
    base_rate: float
    off_rate: float
    method_multiplier: dict[str, float]
    pool_size: int = 40

    def rate(self, hour: int, dow: int) -> float:
        return self.base_rate if hour in self.work_hours and dow in self.work_days else self.off_rate


@dataclass
class Attack:
    user: str
    start: str
    duration_hours: int = 3
    multiplier: float = 10.0

    @property
    def start_time(self) -> datetime:
        return parse_timestamp(self.start)


@dataclass
class ScenarioConfig:
    n_groups: int = 8
    users_per_group: int = 60
    days: int = 27
    start: str = "2024-01-01T00:00:00Z"
    groups: list[GroupProfile] = field(default_factory=list)
    machine_fraction: float = 0.05
    failure_fraction: float = 0.02
    other_method_fraction: float = 0.01
    repeat_rate: float = 0.3
    hr_mislabel_fraction: float = 0.1
    n_attacks: int = 20
    attack_duration_hours: int = 6
    attack_multiplier: float = 10.0
    attack_after_day: int = 20
    attacks: list[Attack] | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.n_groups < 1 or self.users_per_group < 1 or self.days < 1:
            raise ValueError("scenario needs at least one group, user and day")
        for g in self.groups:
            if g.base_rate <= 0 or g.off_rate < 0 or any(v <= 0 for v in g.method_multiplier.values()):
                raise ValueError("group rates must be positive")
        for a in self.attacks or []:
            if a.multiplier < 1:
                raise ValueError("attack multiplier must be >= 1")
            offset = (a.start_time - parse_timestamp(self.start)).total_seconds() / 3600
            if offset < 0 or offset + a.duration_hours > self.days * 24:
                raise ValueError(f"attack on {a.user} falls outside the scenario span")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=list)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        doc = json.loads(text)
        doc["groups"] = [GroupProfile(**g) for g in doc.get("groups", [])]
        if doc.get("attacks") is not None:
            doc["attacks"] = [Attack(**a) for a in doc["attacks"]]
        return cls(**doc)


@dataclass
class GroundTruth:
    groups: dict[str, int]
    attacks: set[tuple[str, str, str]] = field(default_factory=set)

    def to_json(self) -> str:
        attacks = [{"user": u, "bucket": b, "method": m} for u, b, m in sorted(self.attacks)]
        return json.dumps({"groups": dict(sorted(self.groups.items())), "attacks": attacks}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        doc = json.loads(text)
        return cls({u: int(g) for u, g in doc["groups"].items()}, {(a["user"], a["bucket"], a["method"]) for a in doc["attacks"]})


# event tuple: (epoch seconds, user, target, method, outcome)
Event = tuple


@dataclass
class Scenario:
    config: ScenarioConfig
    profiles: list[GroupProfile]
    users: list[str]
    user_group: dict[str, int]
    events_by_user: dict[str, list[Event]]
    noise_events: list[Event]
    truth: GroundTruth
    hr_table: dict[str, str]

    @property
    def t0(self) -> int:
        return int(parse_timestamp(self.config.start).timestamp())

    def events(self) -> list[Event]:
        out = [e for evs in self.events_by_user.values() for e in evs] + self.noise_events
        out.sort(key=lambda e: (e[0] // 3600, e[1], e[0], e[2], e[3], e[4]))
        return out

    def write_jsonl(self, fh: TextIO) -> int:
        n = 0
        for line in iter_jsonl(self):
            fh.write(line)
            n += 1
        return n

    def write_hr_csv(self, fh: TextIO) -> None:
        fh.write("user,division\n")
        for user in sorted(self.hr_table):
            fh.write(f"{user},{self.hr_table[user]}\n")


def default_profiles(n_groups: int, seed: int) -> list[GroupProfile]:
    """Step-profile groups; method effects drawn as log psi[m, g] ~ N(mu_m, 0.3)."""
    rng = RngStream(seed, 901).generator()
    mu = {"kerberos": 0.0, "ntlm": math.log(0.4)}
    profiles = []
    for g in range(n_groups):
        hours, days, off = SCHEDULES[g % len(SCHEDULES)]
        mult = {m: round(float(math.exp(mu[m] + 0.3 * rng.standard_normal())), 4) for m in METHODS}
        profiles.append(GroupProfile(sorted(hours), sorted(days), 3.0, off, mult))
    return profiles


def _user_rng(seed: int, stream: int) -> random.Random:
    return random.Random(int(np.random.SeedSequence([seed, stream]).generate_state(1, dtype=np.uint64)[0]))


def _emit_hour(rnd: random.Random, hour_start: int, user: str, method: str, targets: list[str], repeat_rate: float) -> list[Event]:
    out = []
    for target in targets:
        # repeated authentications to the same target do not change the distinct count
        reps = 1
        while rnd.random() < repeat_rate:
            reps += 1
        for _ in range(reps):
            out.append((hour_start + rnd.randrange(3600), user, target, method, "success"))
    return out


def _poisson(rnd: random.Random, rate: float) -> int:
    if rate <= 0:
        return 0
    if rate > 30:
        # additivity keeps inversion numerically safe for large rates
        return _poisson(rnd, rate / 2) + _poisson(rnd, rate / 2)
    u, k, p = rnd.random(), 0, math.exp(-rate)
    cdf = p
    while u > cdf and p > 0:
        k += 1
        p *= rate / k
        cdf += p
    return k


def _draw_targets(rnd: random.Random, pool: list[str], count: int) -> list[str]:
    if count > len(pool):
        logger.warning("draw of %d distinct targets capped at pool size %d", count, len(pool))
        count = len(pool)
    return rnd.sample(pool, count)


def generate_scenario(config: ScenarioConfig | None = None, seed: int | None = None) -> Scenario:
    """Baseline activity for every user, HR table, then the configured attacks."""
    config = ScenarioConfig() if config is None else config
    if seed is not None:
        config = replace(config, seed=seed)
    profiles = config.groups or default_profiles(config.n_groups, config.seed)
    config = replace(config, groups=profiles)
    config.validate()
    t0 = int(parse_timestamp(config.start).timestamp())
    n_hours = config.days * 24
    pools = [[f"G{g:02d}-SRV{j:03d}" for j in range(p.pool_size)] for g, p in enumerate(profiles)]

    users, user_group, events_by_user = [], {}, {}
    for g, prof in enumerate(profiles):
        hour_rates = []
        for t in range(n_hours):
            stamp = datetime.fromtimestamp(t0 + 3600 * t, tz=timezone.utc)
            hour_rates.append(prof.rate(stamp.hour, day_of_week(stamp)))
        for i in range(config.users_per_group):
            user = f"u{g:02d}{i:03d}"
            users.append(user)
            user_group[user] = g
            rnd = _user_rng(config.seed, 1000 + len(users))
            evs: list[Event] = []
            for t, base in enumerate(hour_rates):
                for method in METHODS:
                    count = _poisson(rnd, base * prof.method_multiplier[method])
                    if count:
                        evs.extend(_emit_hour(rnd, t0 + 3600 * t, user, method, _draw_targets(rnd, pools[g], count), config.repeat_rate))
                if config.failure_fraction and rnd.random() < config.failure_fraction:
                    evs.append((t0 + 3600 * t + rnd.randrange(3600), user, rnd.choice(pools[g]), "kerberos", "failure"))
                if config.other_method_fraction and rnd.random() < config.other_method_fraction:
                    evs.append((t0 + 3600 * t + rnd.randrange(3600), user, rnd.choice(pools[g]), "negotiate", "success"))
            events_by_user[user] = evs

    noise = _machine_noise(config, t0, n_hours, [t for p in pools for t in p], len(users))
    hr = _hr_table(config, user_group)
    scenario = Scenario(config, profiles, users, user_group, events_by_user, noise, GroundTruth(dict(user_group)), hr)
    attacks = config.attacks if config.attacks is not None else default_attacks(scenario)
    scenario.config = replace(config, attacks=attacks)
    for attack in attacks:
        scenario = inject_recon(scenario, attack)
    return scenario


def _machine_noise(config: ScenarioConfig, t0: int, n_hours: int, all_targets: list[str], n_users: int) -> list[Event]:
    rnd = _user_rng(config.seed, 7)
    n_machines = int(round(config.machine_fraction * n_users))
    out = []
    for i in range(n_machines):
        account = f"HOST{i:04d}$"
        for t in range(n_hours):
            for target in _draw_targets(rnd, all_targets, _poisson(rnd, 1.0)):
                out.append((t0 + 3600 * t + rnd.randrange(3600), account, target, "kerberos", "success"))
    for t in range(0, n_hours, 6):
        for account in ("SYSTEM", "Administrator", "ANONYMOUS", "local"):
            out.append((t0 + 3600 * t + rnd.randrange(3600), account, rnd.choice(all_targets), "ntlm", "success"))
    return out


def _hr_table(config: ScenarioConfig, user_group: dict[str, int]) -> dict[str, str]:
    rnd = _user_rng(config.seed, 11)
    table = {}
    for user in sorted(user_group):
        g = user_group[user]
        if rnd.random() < config.hr_mislabel_fraction:
            g = rnd.randrange(config.n_groups)
        table[user] = f"DIV-{chr(ord('A') + g % 26)}{g // 26 or ''}"
    return table


def default_attacks(scenario: Scenario) -> list[Attack]:
    """Attacks on distinct random users, inside their group's work hours after ``attack_after_day``."""
    config = scenario.config
    rnd = _user_rng(config.seed, 13)
    t0 = datetime.fromtimestamp(scenario.t0, tz=timezone.utc)
    victims = rnd.sample(scenario.users, min(config.n_attacks, len(scenario.users)))
    dur = config.attack_duration_hours
    attacks = []
    for user in victims:
        prof = scenario.profiles[scenario.user_group[user]]
        options = []
        for day in range(config.attack_after_day, config.days):
            for hour in range(24):
                start = t0 + timedelta(days=day, hours=hour)
                span = [start + timedelta(hours=j) for j in range(dur)]
                inside = all(s.hour in prof.work_hours and day_of_week(s) in prof.work_days for s in span)
                if inside and span[-1] < t0 + timedelta(days=config.days):
                    options.append(start)
        if not options:
            continue
        attacks.append(Attack(user, format_timestamp(rnd.choice(options)), dur, config.attack_multiplier))
    return attacks


def inject_recon(scenario: Scenario, attack: Attack) -> Scenario:
    """Redraw the attacked hours at ``multiplier`` times the baseline rate, touching targets across all groups."""
    if attack.user not in scenario.user_group:
        raise KeyError(f"unknown user {attack.user!r}")
    if attack.multiplier == 1:
        return scenario
    start = int(attack.start_time.timestamp())
    t0 = scenario.t0
    if start < t0 or start + 3600 * attack.duration_hours > t0 + scenario.config.days * 86400:
        raise ValueError("attack window outside the scenario span")
    g = scenario.user_group[attack.user]
    prof = scenario.profiles[g]
    global_pool = [f"G{h:02d}-SRV{j:03d}" for h, p in enumerate(scenario.profiles) for j in range(p.pool_size)]
    hours = {start + 3600 * j for j in range(attack.duration_hours)}
    rnd = _user_rng(scenario.config.seed, 50_000 + start // 3600 + 7919 * scenario.users.index(attack.user))
    kept = [e for e in scenario.events_by_user[attack.user] if e[0] - e[0] % 3600 not in hours or e[4] != "success" or e[3] not in METHODS]
    truth = set(scenario.truth.attacks)
    added = []
    for hour_start in sorted(hours):
        stamp = datetime.fromtimestamp(hour_start, tz=timezone.utc)
        base = prof.rate(stamp.hour, day_of_week(stamp))
        for method in METHODS:
            count = _poisson(rnd, base * prof.method_multiplier[method] * attack.multiplier)
            if count:
                added.extend(_emit_hour(rnd, hour_start, attack.user, method, _draw_targets(rnd, global_pool, count), scenario.config.repeat_rate))
                truth.add((attack.user, format_timestamp(stamp), method))
    events_by_user = dict(scenario.events_by_user)
    events_by_user[attack.user] = sorted(kept + added)
    return replace(scenario, events_by_user=events_by_user, truth=GroundTruth(scenario.truth.groups, truth))


def expected_rate(scenario: Scenario, user: str, when: datetime, method: str, attack: Attack | None = None) -> float:
    prof = scenario.profiles[scenario.user_group[user]]
    rate = prof.rate(when.hour, day_of_week(when)) * prof.method_multiplier[method]
    if attack is not None and attack.user == user:
        offset = (when - attack.start_time).total_seconds() / 3600
        if 0 <= offset < attack.duration_hours:
            rate *= attack.multiplier
    return rate


def planted_block_adjacency(n_blocks: int = 4, users_per_block: int = 25, targets_per_block: int = 20, rate: float = 2.0, leak: float = 0.02, seed: int = 0):
    """Edge counts of a planted block scenario: users mostly touch their own block's targets."""
    rng = RngStream(seed, 3).generator()
    counts: dict[tuple[str, str], int] = {}
    truth = {}
    for b in range(n_blocks):
        for i in range(users_per_block):
            user = f"b{b}u{i:03d}"
            truth[user] = b
            for bb in range(n_blocks):
                lam = rate if bb == b else leak
                hits = rng.poisson(lam, targets_per_block)
                for j, c in enumerate(hits):
                    if c:
                        counts[(user, f"b{bb}t{j:03d}")] = int(c)
    return counts, truth


def iter_jsonl(scenario: Scenario) -> Iterable[str]:
    for ts, user, target, method, outcome in scenario.events():
        stamp = datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        yield f'{{"ts":"{stamp}","user":"{user}","target":"{target}","method":"{method}","outcome":"{outcome}"}}\n'
