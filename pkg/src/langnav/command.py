"""Navigation command language: grammar, parser, and episode generator.

The command language is a closed mini-grammar over ~40 words.  Commands are
one to three clauses joined by "and", each clause one of:

    turn      := ("take a " | "turn ") DIR (" turn")?
                 (" at the " referent | " from the intersection")?
    lane      := "change to the " DIR " lane"
    straight  := "go straight" (" until the " referent)?
    halt      := ("park" | "stop") (" " REL " the " referent (" on the " SIDE)?
                 | " on the " SIDE | " between the two " OBJPL)
    referent  := (COLOR " ")? OBJ

`parse_command` maps surface text to a structured plan, `generate_command`
samples a feasible plan against a world map together with its ground-truth
route and goal rectangle, and `encode_tokens` turns text into fixed-length
id sequences for the grounding network.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2D
from . import worldsim as ws

UNK_ID = 0
PAD_ID = 1
MAX_TOKENS = 20

KIND_TURN = "turn"
KIND_LANE_CHANGE = "lane_change"
KIND_GO_STRAIGHT = "go_straight"
KIND_PARK = "park"
KIND_STOP = "stop"

HALT_KINDS = (KIND_PARK, KIND_STOP)

DIRECTIONS = ("left", "right")
RELATIONS = ("near", "behind", "in_front_of", "beside", "between", "at")

# surface object word -> semantic class painted by the world generator
OBJECT_CLASSES = {
    "car": ws.CLASS_VEHICLE,
    "bus stop": ws.CLASS_BUS_STOP,
    "traffic light": ws.CLASS_TRAFFIC_LIGHT,
    "building": ws.CLASS_BUILDING,
}
PLURAL_OBJECTS = {"cars": "car", "buildings": "building"}

VOCAB_WORDS = (
    # articles and connectors
    "a", "the", "and", "to", "on", "at", "from", "until", "of", "in", "two",
    # verbs
    "take", "turn", "change", "go", "park", "stop",
    # structure words
    "straight", "lane", "intersection", "front",
    "near", "behind", "beside", "between",
    # directions
    "left", "right",
    # objects
    "car", "cars", "bus", "traffic", "light", "building", "buildings",
) + ws.COLORS


class ParseError(Exception):
    """Command text does not match the grammar.

    `index` is the 0-based position of the offending token (the token count
    if the command ended too early).
    """

    def __init__(self, message, index):
        super().__init__(f"{message} (token {index})")
        self.message = message
        self.index = index


class InfeasibleError(Exception):
    """No valid maneuver plan exists from the given spawn."""


@dataclass(frozen=True)
class Referent:
    """Object mentioned by a command: class word plus optional qualifiers."""

    obj: str
    color: str = ""
    side: str = ""

    def __post_init__(self):
        if self.obj not in OBJECT_CLASSES:
            raise ValueError(f"unknown referent object {self.obj!r}")

    @property
    def class_id(self):
        return OBJECT_CLASSES[self.obj]


@dataclass(frozen=True)
class Maneuver:
    kind: str
    direction: str = None
    relation: str = None
    # a Referent, or a pair of Referents for relation "between"
    referent: object = None

    def __post_init__(self):
        if self.kind in (KIND_TURN, KIND_LANE_CHANGE) and \
                self.direction not in DIRECTIONS:
            raise ValueError(f"{self.kind} requires a direction")
        if self.kind in HALT_KINDS:
            ok = (self.relation and self.referent is not None) or \
                self.direction in DIRECTIONS
            if not ok:
                raise ValueError("halt requires relation+referent or a side")


@dataclass(frozen=True)
class ManeuverPlan:
    maneuvers: tuple
    raw_text: str
    token_count: int

    def __post_init__(self):
        if not 1 <= len(self.maneuvers) <= 3:
            raise ValueError("plans hold one to three maneuvers")
        if self.token_count > MAX_TOKENS:
            raise ValueError("command exceeds the token budget")
        for m in self.maneuvers[:-1]:
            if m.kind in HALT_KINDS:
                raise ValueError("only the final maneuver may halt")


class Vocabulary:
    """Ordered word list; ids start at 2 (0 is UNK, 1 is PAD)."""

    def __init__(self, words=VOCAB_WORDS):
        self.words = tuple(words)
        self._ids = {w: i + 2 for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words) + 2

    def id_of(self, word):
        return self._ids.get(word, UNK_ID)

    def word_of(self, idx):
        if idx == UNK_ID:
            return "<unk>"
        if idx == PAD_ID:
            return "<pad>"
        return self.words[idx - 2]

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            words = [ln.strip() for ln in fh if ln.strip()]
        return cls(words)


def encode_tokens(plan_text, vocab):
    """Text -> (ids, valid) arrays of length 20; truncates and right-pads."""
    words = plan_text.lower().split()[:MAX_TOKENS]
    ids = np.full(MAX_TOKENS, PAD_ID, dtype=np.int64)
    valid = np.zeros(MAX_TOKENS, dtype=bool)
    for i, w in enumerate(words):
        ids[i] = vocab.id_of(w)
        valid[i] = True
    return ids, valid


# ---------------------------------------------------------------------------
# parser

class _Cursor:
    def __init__(self, words):
        self.words = words
        self.pos = 0

    def peek(self):
        return self.words[self.pos] if self.pos < len(self.words) else None

    def take(self, what="a word"):
        w = self.peek()
        if w is None:
            raise ParseError(f"expected {what}, command ended", self.pos)
        self.pos += 1
        return w

    def expect(self, *options):
        idx = self.pos
        w = self.take(" or ".join(repr(o) for o in options))
        if w not in options:
            raise ParseError(
                "expected " + " or ".join(repr(o) for o in options), idx)
        return w


def _parse_referent(cur):
    color = ""
    if cur.peek() in ws.COLORS:
        color = cur.take()
    idx = cur.pos
    w = cur.take("an object")
    if w == "bus":
        cur.expect("stop")
        obj = "bus stop"
    elif w == "traffic":
        cur.expect("light")
        obj = "traffic light"
    elif w in ("car", "building"):
        obj = w
    else:
        raise ParseError("expected an object", idx)
    return Referent(obj, color=color)


def _maybe_side(cur, ref):
    # trailing "on the left/right" qualifies the referent
    if cur.peek() != "on":
        return ref
    cur.take()
    cur.expect("the")
    side = cur.expect(*DIRECTIONS)
    return dataclasses.replace(ref, side=side)


def _parse_turn(cur):
    w = cur.take()
    if w == "take":
        cur.expect("a")
    direction = cur.expect(*DIRECTIONS)
    if cur.peek() == "turn":
        cur.take()
    relation, referent = None, None
    if cur.peek() == "at":
        cur.take()
        cur.expect("the")
        referent = _parse_referent(cur)
        relation = "at"
    elif cur.peek() == "from":
        cur.take()
        cur.expect("the")
        cur.expect("intersection")
    return Maneuver(KIND_TURN, direction=direction, relation=relation,
                    referent=referent)


def _parse_halt(cur):
    kind = KIND_PARK if cur.take() == "park" else KIND_STOP
    idx = cur.pos
    w = cur.peek()
    if w == "on":
        cur.take()
        cur.expect("the")
        side = cur.expect(*DIRECTIONS)
        return Maneuver(kind, direction=side)
    if w == "between":
        cur.take()
        cur.expect("the")
        cur.expect("two")
        pidx = cur.pos
        plural = cur.take("a plural object")
        if plural not in PLURAL_OBJECTS:
            raise ParseError("expected a plural object", pidx)
        obj = PLURAL_OBJECTS[plural]
        return Maneuver(kind, relation="between",
                        referent=(Referent(obj), Referent(obj)))
    if w in ("near", "behind", "beside"):
        relation = cur.take()
    elif w == "in":
        cur.take()
        cur.expect("front")
        cur.expect("of")
        relation = "in_front_of"
    else:
        raise ParseError("expected a relation, a side, or 'between'", idx)
    cur.expect("the")
    ref = _maybe_side(cur, _parse_referent(cur))
    return Maneuver(kind, relation=relation, referent=ref)


def _parse_clause(cur):
    w = cur.peek()
    if w in ("take", "turn"):
        return _parse_turn(cur)
    if w == "change":
        cur.take()
        cur.expect("to")
        cur.expect("the")
        direction = cur.expect(*DIRECTIONS)
        cur.expect("lane")
        return Maneuver(KIND_LANE_CHANGE, direction=direction)
    if w == "go":
        cur.take()
        cur.expect("straight")
        referent = None
        if cur.peek() == "until":
            cur.take()
            cur.expect("the")
            referent = _parse_referent(cur)
        return Maneuver(KIND_GO_STRAIGHT, referent=referent)
    if w in ("park", "stop"):
        return _parse_halt(cur)
    raise ParseError("no clause starts here", cur.pos)


def parse_command(text):
    """Parse surface text into a ManeuverPlan.

    Raises ParseError (with the failing token index) for anything outside
    the grammar; never raises anything else, whatever the input string.
    """
    words = str(text).lower().split()
    if not words:
        raise ParseError("empty command", 0)
    if len(words) > MAX_TOKENS:
        raise ParseError("command exceeds 20 tokens", MAX_TOKENS)
    cur = _Cursor(words)
    starts = [cur.pos]
    maneuvers = [_parse_clause(cur)]
    while cur.peek() is not None:
        idx = cur.pos
        cur.expect("and")
        if len(maneuvers) == 3:
            raise ParseError("more than three clauses", idx)
        starts.append(cur.pos)
        maneuvers.append(_parse_clause(cur))
    for m, start in zip(maneuvers[:-1], starts[:-1]):
        if m.kind in HALT_KINDS:
            raise ParseError("park/stop must be the final clause", start)
    return ManeuverPlan(tuple(maneuvers), raw_text=str(text),
                        token_count=len(words))


# ---------------------------------------------------------------------------
# generator

# lateral offsets in the lane frame (left normal positive); the lane center
# sits 1.75 m right of the road centerline, parking strips at 4.5 m on
# either side of it
LAT_RIGHT_STRIP = -(ws.PARKING_OFFSET - ws.LANE_OFFSET)
LAT_LEFT_STRIP = ws.PARKING_OFFSET + ws.LANE_OFFSET
LAT_OPPOSITE_LANE = 2.0 * ws.LANE_OFFSET

MIN_ROUTE_LENGTH = 18.0
MAX_ROUTE_LENGTH = 130.0
HALT_GAP = 7.0          # longitudinal clearance around referent cars


@dataclass(frozen=True)
class GeneratedRoute:
    """Ground-truth route for a generated command."""

    points: np.ndarray          # (K, 2), spawn to goal center
    goal_pose: Pose2D           # goal rectangle center and heading
    lane_ids: tuple             # lanes traversed, in order
    maneuver_ends: tuple = ()   # cumulative arc length where each ends

    def length(self):
        return ws.polyline_length(self.points)


class _LinkFrame:
    """Straight-link coordinate frame: along the lane and its left normal."""

    def __init__(self, lane):
        self.lane = lane
        p0, p1 = lane.points[0], lane.points[-1]
        self.origin = p0
        d = p1 - p0
        self.length = float(np.hypot(*d))
        self.d = d / self.length
        self.n = np.array([-self.d[1], self.d[0]])
        self.yaw = float(np.arctan2(self.d[1], self.d[0]))

    def locate(self, xy):
        rel = np.asarray(xy, dtype=float) - self.origin
        return float(rel @ self.d), float(rel @ self.n)

    def place(self, along, lat=0.0):
        return self.origin + self.d * along + self.n * lat


def _locate_on_link(world, spawn):
    best = None
    for ln in world.lanes:
        if ln.kind != "link":
            continue
        fr = _LinkFrame(ln)
        along, lat = fr.locate((spawn.x, spawn.y))
        along = min(max(along, 0.0), fr.length)
        p = fr.place(along)
        dist = float(np.hypot(p[0] - spawn.x, p[1] - spawn.y))
        if best is None or dist < best[0]:
            best = (dist, ln, along)
    if best is None or best[0] > 3.0:
        raise InfeasibleError("spawn is not on any link lane")
    return best[1], best[2]


def _adjacent_landmarks(world, frame, lo, hi):
    """Landmarks abeam the link between arc positions lo and hi."""
    found = []
    for lm in world.landmarks:
        center = lm.polygon.mean(axis=0)
        along, lat = frame.locate(center)
        if not lo <= along <= hi:
            continue
        limit = 28.0 if lm.class_id == ws.CLASS_BUILDING else 9.0
        if abs(lat) <= limit:
            found.append((lm, along, lat))
    return found


def _strip_lat(lat_sign):
    return LAT_LEFT_STRIP if lat_sign > 0 else LAT_RIGHT_STRIP


def _car_pairs(cars):
    """Pairs of parked cars on the same strip with a gap to park in."""
    pairs = []
    for i in range(len(cars)):
        for j in range(i + 1, len(cars)):
            (a, sa, la), (b, sb, lb) = cars[i], cars[j]
            if la * lb <= 0:
                continue
            gap = abs(sa - sb)
            if not 6.5 <= gap <= 12.0:
                continue
            mid = 0.5 * (sa + sb)
            blocked = any(abs(sc - mid) < 0.4 * gap
                          for _, sc, lc in cars
                          if lc * la > 0 and sc not in (sa, sb))
            if not blocked:
                pairs.append((min(sa, sb), max(sa, sb), la))
    return pairs


def _obj_word(class_id):
    for word, cid in OBJECT_CLASSES.items():
        if cid == class_id:
            return word
    raise ValueError(f"no word for class {class_id}")


def _ref_phrase(ref):
    return f"{ref.color} {ref.obj}" if ref.color else ref.obj


_REL_SURFACE = {"near": "near", "behind": "behind", "beside": "beside",
                "in_front_of": "in front of"}


class _RouteBuilder:
    def __init__(self, lane, start_s):
        self.frame = _LinkFrame(lane)
        self.s = start_s
        self.segments = [self.frame.place(start_s)[None, :]]
        self.lane_ids = [lane.id]

    def extend(self, pts):
        self.segments.append(np.asarray(pts, dtype=float))

    def run_to(self, along, lat=0.0):
        self.extend([self.frame.place(along, lat)])
        self.s = along

    def enter(self, conn, link):
        """Cross a junction: finish the current link, follow the connector."""
        self.run_to(self.frame.length)
        self.extend(conn.points)
        self.lane_ids.extend([conn.id, link.id])
        self.frame = _LinkFrame(link)
        self.s = 0.0

    def pull_in(self, along, lat):
        """Leave the lane center diagonally to a parking position."""
        start = max(self.s, along - 10.0)
        self.run_to(start)
        a = np.linspace(start, along, 6)[1:]
        t = np.linspace(0.0, 1.0, 6)[1:]
        self.extend(np.stack([self.frame.place(ai, lat * ti)
                              for ai, ti in zip(a, t)]))
        self.s = along

    def current_length(self):
        pts = np.concatenate(self.segments, axis=0)
        return float(ws.polyline_length(pts))

    def finish(self, goal_along, goal_lat, maneuver_ends=()):
        pose = Pose2D(*self.frame.place(goal_along, goal_lat), self.frame.yaw)
        pts = np.concatenate(self.segments, axis=0)
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.hypot(*(pts[1:] - pts[:-1]).T) > 1e-9
        ends = tuple(maneuver_ends)
        if ends:
            total = float(ws.polyline_length(pts[keep]))
            ends = ends[:-1] + (total,)
        return GeneratedRoute(pts[keep], pose, tuple(self.lane_ids), ends)


def _movement_options(world, lane, final):
    """Turns and straights available at the end of a link."""
    opts = []
    for conn_id in world.successors.get(lane.id, ()):
        conn = world.lane(conn_id)
        if conn.kind != "conn" or not world.successors.get(conn_id):
            continue
        nxt = world.lane(world.successors[conn_id][0])
        if not final and nxt.length() < 30.0:
            continue
        opts.append((conn.turn, conn, nxt))
    return opts


def _gen_halt(world, rng, builder, first):
    """Choose and emit a halting maneuver on the builder's current link."""
    frame = builder.frame
    lo = builder.s + (16.0 if first else 10.0)
    hi = frame.length - 6.0
    if hi - lo < 2.0:
        return None
    verb = KIND_PARK if rng.random() < 0.65 else KIND_STOP

    near = _adjacent_landmarks(world, frame, lo + 2.0, hi)
    cars = [(lm, s, lat) for lm, s, lat in near
            if lm.class_id == ws.CLASS_VEHICLE]

    choices = ["side"]
    if near:
        choices.append("referent")
    pairs = _car_pairs(cars)
    if pairs:
        choices.append("between")
    pick = str(rng.choice(choices, p=_halt_weights(choices)))

    if pick == "between":
        sa, sb, lat = pairs[int(rng.integers(len(pairs)))]
        mid = 0.5 * (sa + sb)
        if not lo <= mid <= hi:
            return None
        m = Maneuver(verb, relation="between",
                     referent=(Referent("car"), Referent("car")))
        text = f"{verb} between the two cars"
        builder.pull_in(mid, _strip_lat(lat))
        return m, text, mid, _strip_lat(lat)

    if pick == "referent":
        lm, ref_s, ref_lat = near[int(rng.integers(len(near)))]
        relation = str(rng.choice(("near", "behind", "in_front_of", "beside")))
        is_car = lm.class_id == ws.CLASS_VEHICLE
        if relation == "behind":
            goal_s = ref_s - HALT_GAP
        elif relation == "in_front_of":
            goal_s = ref_s + HALT_GAP
        elif is_car:
            # abeam a parked car would overlap it; settle short of it
            goal_s = ref_s - HALT_GAP
        else:
            goal_s = ref_s
        if not lo <= goal_s <= hi:
            return None
        goal_lat = _strip_lat(ref_lat)
        # keep clear of every other parked car on the same strip
        for _, sc, lc in cars:
            if lc * ref_lat > 0 and abs(sc - goal_s) < HALT_GAP - 0.5 \
                    and sc != ref_s:
                return None
        color = lm.color if is_car and rng.random() < 0.6 else ""
        side = ""
        if is_car and rng.random() < 0.3:
            side = "left" if ref_lat > 0 else "right"
        ref = Referent(_obj_word(lm.class_id), color=color, side=side)
        m = Maneuver(verb, relation=relation, referent=ref)
        text = f"{verb} {_REL_SURFACE[relation]} the {_ref_phrase(ref)}"
        if side:
            text += f" on the {side}"
        builder.pull_in(goal_s, goal_lat)
        return m, text, goal_s, goal_lat

    side = str(rng.choice(DIRECTIONS))
    goal_s = float(rng.uniform(lo, min(hi, lo + 14.0)))
    goal_lat = LAT_LEFT_STRIP if side == "left" else LAT_RIGHT_STRIP
    m = Maneuver(verb, direction=side)
    builder.pull_in(goal_s, goal_lat)
    return m, f"{verb} on the {side}", goal_s, goal_lat


def _halt_weights(choices):
    base = {"side": 0.3, "referent": 0.5, "between": 0.2}
    w = np.array([base[c] for c in choices])
    return w / w.sum()


def _gen_movement(world, rng, builder, final):
    opts = _movement_options(world, builder.frame.lane, final)
    if not opts:
        return None
    turn, conn, nxt = opts[int(rng.integers(len(opts)))]
    builder.enter(conn, nxt)
    if turn in DIRECTIONS:
        head = str(rng.choice((f"turn {turn}", f"take a {turn} turn"),
                              p=(0.6, 0.4)))
        tail = rng.random()
        if tail < 0.08:
            m = Maneuver(KIND_TURN, direction=turn, relation="at",
                         referent=Referent("traffic light"))
            return m, f"{head} at the traffic light"
        if tail < 0.18:
            return (Maneuver(KIND_TURN, direction=turn),
                    f"{head} from the intersection")
        return Maneuver(KIND_TURN, direction=turn), head
    referent = None
    text = "go straight"
    if final and rng.random() < 0.3:
        frame = builder.frame
        marks = [(lm, s, lat) for lm, s, lat in
                 _adjacent_landmarks(world, frame, 12.0, frame.length - 5.0)
                 if lm.class_id in (ws.CLASS_VEHICLE, ws.CLASS_BUS_STOP)]
        if marks:
            lm, s, lat = marks[int(rng.integers(len(marks)))]
            color = lm.color if lm.class_id == ws.CLASS_VEHICLE and \
                rng.random() < 0.75 else ""
            referent = Referent(_obj_word(lm.class_id), color=color)
            text += f" until the {_ref_phrase(referent)}"
            return (Maneuver(KIND_GO_STRAIGHT, referent=referent), text, s)
    return Maneuver(KIND_GO_STRAIGHT, referent=referent), text


def _gen_lane_change(rng, builder):
    frame = builder.frame
    if builder.s + 26.0 > frame.length - 4.0:
        return None
    builder.run_to(builder.s + 4.0)
    a = np.linspace(builder.s, builder.s + 10.0, 6)[1:]
    t = np.linspace(0.0, 1.0, 6)[1:]
    builder.extend(np.stack([frame.place(ai, LAT_OPPOSITE_LANE * ti)
                             for ai, ti in zip(a, t)]))
    builder.s += 10.0
    goal_s = builder.s + 8.0
    builder.extend([frame.place(goal_s, LAT_OPPOSITE_LANE)])
    builder.s = goal_s
    m = Maneuver(KIND_LANE_CHANGE, direction="left")
    return m, "change to the left lane", goal_s, LAT_OPPOSITE_LANE


def _try_plan(world, rng, start_lane, start_s):
    shapes = (("halt",), ("move",), ("lane",), ("move", "halt"),
              ("move", "lane"), ("move", "move"), ("move", "move", "halt"))
    shape = shapes[int(rng.choice(len(shapes),
                                  p=(0.24, 0.26, 0.05, 0.22,
                                     0.03, 0.07, 0.13)))]
    builder = _RouteBuilder(start_lane, start_s)
    maneuvers, texts, ends = [], [], []
    goal_s, goal_lat = None, 0.0
    for i, slot in enumerate(shape):
        final = i == len(shape) - 1
        if slot == "halt":
            out = _gen_halt(world, rng, builder, first=i == 0)
            if out is None:
                return None
            m, text, goal_s, goal_lat = out
        elif slot == "lane":
            out = _gen_lane_change(rng, builder)
            if out is None:
                return None
            m, text, goal_s, goal_lat = out
        else:
            out = _gen_movement(world, rng, builder, final)
            if out is None:
                return None
            if len(out) == 3:
                m, text, goal_s = out
            else:
                m, text = out
                goal_s = None
        maneuvers.append(m)
        texts.append(text)
        ends.append(builder.current_length())
    if goal_s is None:
        lo = 12.0 if builder.frame.length < 25.0 else 15.0
        goal_s = min(lo, builder.frame.length - 4.0)
        if goal_s <= builder.s + 2.0:
            return None
        goal_lat = 0.0
        builder.run_to(goal_s)
    elif maneuvers[-1].kind == KIND_GO_STRAIGHT:
        if goal_s <= builder.s + 2.0 or goal_s > builder.frame.length - 4.0:
            return None
        goal_lat = 0.0
        builder.run_to(goal_s)
    route = builder.finish(goal_s, goal_lat, ends)
    length = route.length()
    if not MIN_ROUTE_LENGTH <= length <= MAX_ROUTE_LENGTH:
        return None
    text = " and ".join(texts)
    if len(text.split()) > MAX_TOKENS:
        return None
    plan = ManeuverPlan(tuple(maneuvers), raw_text=text,
                        token_count=len(text.split()))
    return plan, route


def generate_command(world, spawn, seed):
    """Sample a feasible (plan, route) pair from a spawn pose.

    Deterministic per seed.  Raises InfeasibleError when the road graph
    offers no valid plan from this spawn.
    """
    rng = np.random.default_rng(seed)
    start_lane, start_s = _locate_on_link(world, spawn)
    for _ in range(40):
        out = _try_plan(world, rng, start_lane, start_s)
        if out is not None:
            return out
    raise InfeasibleError(f"no feasible plan from spawn {spawn}")


def _first_move_key(plan):
    m = plan.maneuvers[0]
    if m.kind == KIND_TURN:
        return "turn-" + m.direction
    if m.kind == KIND_GO_STRAIGHT:
        return "straight"
    if m.kind == KIND_LANE_CHANGE:
        return "lane-" + m.direction
    return "halt"


def command_variants(world, spawn, seed, tries=200) -> dict:
    """Commands from one spawn whose routes split at the first decision.

    Samples plans until a left turn, a right turn, and a straight
    continuation are all represented (or tries run out) and returns
    {"turn-left"|"turn-right"|"straight": (plan, route)}.  Because the
    routes share the spawn, they overlap up to the first junction and
    differ only in the maneuver the command names, which makes them the
    counterfactual set for a single approach.
    """
    want = {"turn-left", "turn-right", "straight"}
    found = {}
    for k in range(tries):
        try:
            plan, route = generate_command(world, spawn, seed + k)
        except InfeasibleError:
            break
        key = _first_move_key(plan)
        if key in want and key not in found:
            found[key] = (plan, route)
        if want <= found.keys():
            break
    return found
