"""The parking MDP: episode lifecycle, dynamics, rewards, goal mechanics,
give-way contexts, and terminal handling for N independent agents.

Step order within a single tick: goal transitions (dynamic goals) are
applied on the pre-move state, then every agent moves in index order, then
collisions are resolved against post-move poses, then tracking refresh,
lost-goal handling, park checks, and rewards. Terminal agents respawn at
the end of the tick; a successful park first relocates the parked car
farthest from all agents into the space the parking agent vacates, keeping
the parked-car count constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import EnvironmentConfig, max_world_distance
from .geometry import (
    GridSpec,
    LocalPose,
    Pose,
    bearing_index_units,
    clamp_velocity,
    heading_vector,
    localize,
    motion_step,
    round_half_up,
    wrap_signed_index,
)
from .observation import (
    ActionSchema,
    NearbyCarObs,
    ObsInputs,
    ObsSchema,
    build_action_schema,
    build_observation,
    build_schema,
)
from .world import (
    CarBody,
    Layout,
    RingSpec,
    SpaceTracker,
    WorldState,
    default_layout,
    obb_corners,
    obb_intersects,
    point_to_obb_distance,
    point_to_segment_distance,
)

PARK_CENTER_THRESHOLD = 1.0  # world units from space center

# context id -> metric name fragment
CONTEXTS = {
    ("L", "S"): "LocalSameGoal",
    ("L", "A"): "LocalAnyGoal",
    ("G", "S"): "GlobalSameGoal",
    ("G", "A"): "GlobalAnyGoal",
    ("G+", "S"): "NonLocalSameGoal",
    ("G+", "A"): "NonLocalAnyGoal",
}

TRANSITIONS = (
    "StopExplore", "StopGoal", "ChangeGoal", "ContinueExplore", "ContinueGoal",
)


@dataclass(slots=True)
class ActionTuple:
    accel: int
    omega: int
    delta_g: int | None = None


@dataclass(slots=True)
class StepEvents:
    crash_kind: str | None = None  # agent-car | parked-car | wall
    parked: bool = False
    halted: bool = False
    lost_goal: bool = False
    transition: str | None = None
    transition_reward: float = 0.0
    gave_way: dict = field(default_factory=dict)  # context name -> bool
    velocity: int = 0
    omega: int = 0
    exploring: bool = False
    moved_toward_goal: int = 0  # sign of goal-distance decrease
    park_velocity: int | None = None
    # set on terminal steps only
    episode_steps: int = 0
    episode_reward: float = 0.0
    ratio_explore: float | None = None
    ratio_toward_goal: float | None = None
    ratio_toward_space_exploring: float | None = None


@dataclass(slots=True)
class StepOutcome:
    reward: float
    terminal: str | None  # parked | crashed | timeout | None
    events: StepEvents


@dataclass(slots=True)
class AgentState:
    body: CarBody
    v: int = 0
    goal_space: int | None = None  # space id; None = exploring (dynamic mode)
    episode_step: int = 0
    prev_goal_distance: float = 0.0
    tracker: SpaceTracker | None = None
    cur_rings: tuple[int, ...] = ()
    ring_history: list = field(default_factory=list)
    episode_reward: float = 0.0
    steps_exploring: int = 0
    steps_toward_goal: int = 0
    steps_toward_space_exploring: int = 0


class ParkingEnv:
    def __init__(
        self,
        cfg: EnvironmentConfig,
        layout: Layout | None = None,
        rng=None,
        seed: int | None = None,
    ):
        import random as _random

        if rng is None:
            rng = _random.Random(seed)
        self.rng = rng
        self.cfg = cfg
        layout = layout or default_layout()
        self.grid: GridSpec = cfg.grid(layout.extent)
        self.layout = layout
        self.ring_spec: RingSpec | None = cfg.ring_spec()
        self.schema: ObsSchema = build_schema(cfg, layout.extent)
        self.action_schema: ActionSchema = build_action_schema(cfg)
        self.obs_mode = "normalized" if cfg._normalizeObs else "discrete"
        self.d_max = max_world_distance(layout.extent)
        self.car_scale = 1.0
        self.world: WorldState = None  # type: ignore[assignment]
        self.agents: list[AgentState] = []
        # running totals, read by trainers for metric recording
        self.stats = {
            "episodes": 0,
            "parked": 0,
            "crashed": 0,
            "halted": 0,
            "crash_wall": 0,
            "crash_agent": 0,
            "crash_parked": 0,
            "lost_goal": 0,
        }
        for t in TRANSITIONS:
            self.stats[f"transition_{t}"] = 0
        for name in CONTEXTS.values():
            self.stats[f"gave_way_{name}_pos"] = 0
            self.stats[f"gave_way_{name}_total"] = 0
        self._cell_cache: dict = {}
        self._hit_cache: dict = {}
        self._cache_version = -1
        self.reset()

    # ------------------------------------------------------------- lifecycle

    def reset(self) -> None:
        self.world = WorldState.from_layout(self.layout, self.grid)
        self.agents = []
        for i in range(self.cfg._numAgents):
            body = CarBody(0.0, 0.0, 0, scale=self.car_scale, uid=i)
            self.world.agents.append(body)
            n_space = (self.cfg._obsNearbyParkingSpotsCount
                       if self.cfg._dynamicGoals else 0)
            self.agents.append(
                AgentState(body=body,
                           tracker=SpaceTracker(n_space) if n_space else None)
            )
        self.world.place_parked_cars(self.cfg._numParkedCars, self.rng)
        for car in self.world.parked:
            car.scale = self.car_scale
        for i in range(len(self.agents)):
            self._respawn(i)

    def set_car_scale(self, scale: float) -> None:
        """Switch every hitbox to a new scale (training/evaluation phases)."""
        self.car_scale = scale
        for car in self.world.all_cars():
            car.scale = scale
        self.world.version += 1

    # -------------------------------------------------------------- spawning

    def _goal_candidates(self, agent_i: int) -> list[int]:
        taken = {a.goal_space for j, a in enumerate(self.agents)
                 if j != agent_i and a.goal_space is not None}
        return [sid for sid in self.world.free_space_ids() if sid not in taken]

    def _spawn_legal(self, body: CarBody, agent_i: int) -> bool:
        min_d = self.cfg.mdp_to_world(self.cfg.carSpawnMinDistance)
        for car in self.world.all_cars():
            if car.uid == agent_i:
                continue
            if math.hypot(car.x - body.x, car.y - body.y) < min_d:
                return False
        if self._static_hit(body.x, body.y, body.theta) is not None:
            return False
        for j, other in enumerate(self.agents):
            if j != agent_i and obb_intersects(body, other.body, self.grid):
                return False
        return True

    def _place(self, agent_i: int, x: float, y: float, theta: int) -> bool:
        body = self.agents[agent_i].body
        x, y = self.grid.snap(x, y)
        old = (body.x, body.y, body.theta)
        body.x, body.y, body.theta = x, y, theta
        if self._spawn_legal(body, agent_i):
            return True
        body.x, body.y, body.theta = old
        return False

    def _spawn_plain(self, agent_i: int, near: tuple[float, float] | None = None,
                     radius: float = 0.0) -> bool:
        points = self.world.road_points
        if near is not None:
            points = [p for p in points
                      if math.hypot(p[0] - near[0], p[1] - near[1]) <= radius]
            if not points:
                return False
        for _ in range(200):
            x, y = self.rng.choice(points)
            theta = self.rng.randrange(self.grid.theta_granularity)
            if self._place(agent_i, x, y, theta):
                return True
        return False

    def spawn_crash_position(
        self, a2_pos: tuple[float, float], g2_pos: tuple[float, float],
        g1_pos: tuple[float, float], margin: float = 0.2,
    ) -> tuple[float, float, float, float] | None:
        """Position on the line crash-point -> g1, extended past the crash
        point by the target agent's distance to it. Returns (x, y, crash_x,
        crash_y) or None when the geometry degenerates."""
        ex, ey = g2_pos[0] - a2_pos[0], g2_pos[1] - a2_pos[1]
        if ex == 0.0 and ey == 0.0:
            return None
        u = self.rng.uniform(margin, 1.0 - margin)
        cx, cy = a2_pos[0] + u * ex, a2_pos[1] + u * ey
        d2 = math.hypot(cx - a2_pos[0], cy - a2_pos[1])
        gx, gy = cx - g1_pos[0], cy - g1_pos[1]
        norm = math.hypot(gx, gy)
        if norm == 0.0:
            return None
        return cx + d2 * gx / norm, cy + d2 * gy / norm, cx, cy

    def _spawn_crash(self, agent_i: int, g1: int | None) -> bool:
        min_target = self.cfg.mdp_to_world(self.cfg.spawnCrashTargetAgentMinDist)
        others = []
        for j, other in enumerate(self.agents):
            if j == agent_i or other.goal_space is None:
                continue
            sp = self.world.spaces[other.goal_space]
            if math.hypot(sp.x - other.body.x, sp.y - other.body.y) >= min_target:
                others.append((j, sp))
        if not others:
            return False
        if g1 is None:
            free = self._goal_candidates(agent_i)
            if not free:
                return False
            g1 = self.rng.choice(free)
        g1_sp = self.world.spaces[g1]
        for _ in range(20):
            j, g2_sp = self.rng.choice(others)
            other = self.agents[j]
            got = self.spawn_crash_position(
                (other.body.x, other.body.y), (g2_sp.x, g2_sp.y),
                (g1_sp.x, g1_sp.y))
            if got is None:
                continue
            x, y, cx, cy = got
            e = float(self.world.extent)
            if not (0.0 < x < e and 0.0 < y < e):
                continue
            theta = round_half_up(
                bearing_index_units(cx - x, cy - y, self.grid)
            ) % self.grid.theta_granularity
            if self._place(agent_i, x, y, theta):
                return True
        return False

    def _respawn(self, agent_i: int) -> None:
        agent = self.agents[agent_i]
        cfg = self.cfg
        goal: int | None = None
        if not cfg._dynamicGoals:
            candidates = self._goal_candidates(agent_i)
            if not candidates:
                raise RuntimeError("no free parking space left for a goal")
            goal = self.rng.choice(candidates)
        # pick one scheme up front; a failed scheme falls back to the plain
        # random spawn, not to the next scheme in line
        scheme = "plain"
        if cfg.spawnCrashRatio > 0 and self.rng.random() < cfg.spawnCrashRatio:
            scheme = "crash"
        elif cfg.spawnCloseRatio > 0 and goal is not None \
                and self.rng.random() < cfg.spawnCloseRatio:
            scheme = "close"
        placed = False
        if scheme == "crash":
            placed = self._spawn_crash(agent_i, goal)
        elif scheme == "close":
            sp = self.world.spaces[goal]
            placed = self._spawn_plain(agent_i, near=(sp.x, sp.y),
                                       radius=float(cfg._spawnCloseDist))
        if not placed and not self._spawn_plain(agent_i):
            raise RuntimeError("could not find a legal spawn position")
        agent.v = 0
        agent.goal_space = goal
        agent.episode_step = 0
        agent.episode_reward = 0.0
        agent.steps_exploring = 0
        agent.steps_toward_goal = 0
        agent.steps_toward_space_exploring = 0
        agent.ring_history = []
        if agent.tracker:
            agent.tracker.reset()
            self._refresh_tracking(agent_i)
        if self.ring_spec:
            agent.cur_rings = self._ring_counts(agent_i)
        agent.prev_goal_distance = self._goal_distance(agent)

    # ------------------------------------------------------------- queries

    def _goal_distance(self, agent: AgentState) -> float:
        if agent.goal_space is None:
            return 0.0
        sp = self.world.spaces[agent.goal_space]
        return math.hypot(sp.x - agent.body.x, sp.y - agent.body.y)

    def _cell(self, x: float, y: float):
        """Per-position cache of static-obstacle data: uncapped ring counts
        and nearest parked-car center distance."""
        if self.world.version != self._cache_version:
            self._cell_cache.clear()
            self._hit_cache.clear()
            self._cache_version = self.world.version
        key = (x, y)
        got = self._cell_cache.get(key)
        if got is None:
            ring_static = None
            if self.ring_spec:
                dists = [point_to_segment_distance(x, y, w)
                         for w in self.world.walls]
                if not self.ring_spec.walls_only:
                    dists.extend(
                        point_to_obb_distance(x, y, car, self.grid)
                        for car in self.world.parked)
                ring_static = tuple(
                    sum(1 for d in dists if d < diam / 2.0)
                    for diam in self.ring_spec.diameters)
            nearest = self.d_max
            for car in self.world.parked:
                d = math.hypot(car.x - x, car.y - y)
                if d < nearest:
                    nearest = d
            got = (ring_static, nearest)
            self._cell_cache[key] = got
        return got

    def _ring_counts(self, agent_i: int) -> tuple[int, ...]:
        spec = self.ring_spec
        body = self.agents[agent_i].body
        static, _ = self._cell(body.x, body.y)
        if spec.walls_only or len(self.agents) == 1:
            return tuple(min(c, spec.max_count) for c in static)
        counts = list(static)
        for j, other in enumerate(self.agents):
            if j == agent_i:
                continue
            d = point_to_obb_distance(body.x, body.y, other.body, self.grid)
            for i, diam in enumerate(spec.diameters):
                if d < diam / 2.0:
                    counts[i] += 1
        return tuple(min(c, spec.max_count) for c in counts)

    def _nearest_car_distance(self, agent_i: int) -> float:
        body = self.agents[agent_i].body
        _, nearest = self._cell(body.x, body.y)
        for j, other in enumerate(self.agents):
            if j == agent_i:
                continue
            d = math.hypot(other.body.x - body.x, other.body.y - body.y)
            if d < nearest:
                nearest = d
        return nearest

    def _static_hit(self, x: float, y: float, theta: int) -> str | None:
        if self.world.version != self._cache_version:
            self._cell_cache.clear()
            self._hit_cache.clear()
            self._cache_version = self.world.version
        key = (x, y, theta)
        got = self._hit_cache.get(key, False)
        if got is False:
            got = self.world.collides_static(
                CarBody(x, y, theta, scale=self.car_scale))
            self._hit_cache[key] = got
        return got

    def _refresh_tracking(self, agent_i: int) -> None:
        agent = self.agents[agent_i]
        tracked = self.world.nearest_free_spaces(
            agent.body.x, agent.body.y, agent.tracker.n_space, math.inf)
        agent.tracker.update(tracked)

    def _tracked_agents(self, agent_i: int) -> list[int]:
        """Agent ids among this agent's tracked cars (pre-move state)."""
        if not self.cfg._obsNearbyCars or self.cfg._obsNearbyCarsCount == 0:
            return []
        body = self.agents[agent_i].body
        cars = self.world.nearest_cars(
            body.x, body.y, agent_i, self.cfg._obsNearbyCarsCount,
            float(self.cfg._obsNearbyCarsDiameter))
        return [c.uid for c in cars if c.kind == "agent"]

    def context_membership(self, agent_i: int) -> dict:
        """Give-way context membership on the current full state, for all
        six contexts. Empty when the agent has no goal."""
        agent = self.agents[agent_i]
        if agent.goal_space is None:
            return {}
        sp = self.world.spaces[agent.goal_space]
        my_d = math.hypot(sp.x - agent.body.x, sp.y - agent.body.y)
        tracked = set(self._tracked_agents(agent_i))
        local_any = local_same = global_any = global_same = False
        for j, other in enumerate(self.agents):
            if j == agent_i:
                continue
            d = math.hypot(sp.x - other.body.x, sp.y - other.body.y)
            if d >= my_d:
                continue
            global_any = True
            same = other.goal_space == agent.goal_space
            if same:
                global_same = True
            if j in tracked:
                local_any = True
                if same:
                    local_same = True
        return {
            ("L", "S"): local_same,
            ("L", "A"): local_any,
            ("G", "S"): global_same,
            ("G", "A"): global_any,
            ("G+", "S"): global_same and not local_same,
            ("G+", "A"): global_any and not local_any,
        }

    def global_info(self, agent_i: int, space_id: int) -> tuple[float, float | None]:
        sp = self.world.spaces[space_id]
        dists = [math.hypot(sp.x - a.body.x, sp.y - a.body.y)
                 for a in self.agents]
        same = [d for a, d in zip(self.agents, dists)
                if a.goal_space == space_id]
        return min(dists), (min(same) if same else None)

    # ------------------------------------------------------------ observing

    def observe(self, agent_i: int) -> list:
        agent = self.agents[agent_i]
        cfg = self.cfg
        inputs = ObsInputs(velocity=agent.v)
        if agent.goal_space is not None:
            sp = self.world.spaces[agent.goal_space]
            inputs.goal = localize(
                agent.body.pose, Pose(sp.x, sp.y, sp.theta), self.grid)
        if cfg._dynamicGoals:
            slot = (agent.tracker.slot_of(agent.goal_space)
                    if agent.goal_space is not None else None)
            inputs.own_goal_index = slot + 1 if slot is not None else 0
        if self.ring_spec:
            inputs.rings = agent.cur_rings
            inputs.ring_history = agent.ring_history
        if cfg._obsNearbyCars and cfg._obsNearbyCarsCount > 0:
            cars = self.world.nearest_cars(
                agent.body.x, agent.body.y, agent_i,
                cfg._obsNearbyCarsCount, float(cfg._obsNearbyCarsDiameter))
            for car in cars:
                lp = localize(agent.body.pose, car.pose, self.grid)
                entry = NearbyCarObs(lp)
                if car.kind == "agent":
                    other = self.agents[car.uid]
                    entry.velocity = other.v
                    if cfg._obsNearbyCarsGoal and other.goal_space is not None:
                        if cfg._dynamicGoals:
                            slot = (agent.tracker.slot_of(other.goal_space)
                                    if agent.tracker else None)
                            n_space = cfg._obsNearbyParkingSpotsCount
                            entry.goal_index = (
                                slot + 1 if slot is not None else n_space + 1)
                        else:
                            osp = self.world.spaces[other.goal_space]
                            entry.goal_lp = localize(
                                other.body.pose,
                                Pose(osp.x, osp.y, osp.theta), self.grid)
                    elif cfg._obsNearbyCarsGoal and cfg._dynamicGoals:
                        entry.goal_index = 0  # exploring
                inputs.nearby.append(entry)
        if cfg._dynamicGoals and agent.tracker:
            for sid in agent.tracker.slots:
                if sid is None:
                    inputs.spaces.append(None)
                    inputs.global_any.append(None)
                    inputs.global_same.append(None)
                else:
                    sp = self.world.spaces[sid]
                    inputs.spaces.append(localize(
                        agent.body.pose, Pose(sp.x, sp.y, sp.theta),
                        self.grid))
                    any_d, same_d = self.global_info(agent_i, sid)
                    inputs.global_any.append(any_d)
                    inputs.global_same.append(same_d)
        return build_observation(self.schema, cfg, inputs, self.obs_mode)

    # -------------------------------------------------------------- stepping

    def _check_action(self, action: ActionTuple) -> None:
        cfg = self.cfg
        if not -cfg.max_reverse_accel <= action.accel <= cfg._maxDeltaVMagnitude:
            raise ValueError(f"acceleration {action.accel} outside domain")
        if abs(action.omega) > cfg._maxDeltaThetaMagnitude:
            raise ValueError(f"angular velocity {action.omega} outside domain")
        if cfg._dynamicGoals:
            if action.delta_g is None:
                raise ValueError("dynamic goals require a delta_g action")
            if not 0 <= action.delta_g <= cfg._obsNearbyParkingSpotsCount:
                raise ValueError(f"goal choice {action.delta_g} outside domain")
        elif action.delta_g not in (None, 0):
            raise ValueError("delta_g is only available with dynamic goals")

    def _goal_transition(self, agent_i: int, delta_g: int, events: StepEvents) -> float:
        """Apply the dynamic-goal action on the pre-move state; returns the
        transition reward and records conformity counts."""
        agent = self.agents[agent_i]
        cfg = self.cfg
        old = agent.goal_space
        memberships = self.context_membership(agent_i)
        # conformity: did the agent change goal when a context said to
        if old is not None:
            old_slot = agent.tracker.slot_of(old)
            gave_way = delta_g != (old_slot + 1 if old_slot is not None else 0)
            for ctx, inside in memberships.items():
                if inside:
                    name = CONTEXTS[ctx]
                    events.gave_way[name] = gave_way
                    self.stats[f"gave_way_{name}_total"] += 1
                    if gave_way:
                        self.stats[f"gave_way_{name}_pos"] += 1
        new: int | None = None
        if delta_g > 0:
            new = agent.tracker.slots[delta_g - 1]  # empty slot -> explore
        scheme = ("L" if cfg._punishBetterOtherAgentLocal else "G",
                  "S" if cfg._punishBetterOtherGoalAgent else "A")
        bad_goal = bool(memberships) and memberships[scheme]
        if old is None and new is None:
            category, reward = "ContinueExplore", cfg.rewDeltaGoalContinueExp
        elif old is None:
            category, reward = "StopExplore", cfg.rewDeltaGoalStopExp
        elif new is None:
            category, reward = "StopGoal", cfg.stop_goal_reward
        elif new == old:
            category = "ContinueGoal"
            reward = (cfg.rewDeltaGoalContinueGoalBetterOtherAgent
                      if bad_goal else cfg.rewDeltaGoalContinueGoal)
        else:
            category, reward = "ChangeGoal", cfg.rewDeltaGoalDiffGoal
        agent.goal_space = new
        if new != old:
            agent.prev_goal_distance = self._goal_distance(agent)
        events.transition = category
        events.transition_reward = reward
        self.stats[f"transition_{category}"] += 1
        return reward

    def step_all(self, actions: list[ActionTuple]) -> list[StepOutcome]:
        if len(actions) != len(self.agents):
            raise ValueError(
                f"expected {len(self.agents)} actions, got {len(actions)}")
        for action in actions:
            self._check_action(action)
        cfg = self.cfg
        tau = cfg._maxSteps
        events = [StepEvents() for _ in self.agents]
        rewards = [0.0 for _ in self.agents]

        # phase 1: goal transitions on the pre-move full state
        if cfg._dynamicGoals:
            for i, action in enumerate(actions):
                rewards[i] += self._goal_transition(i, action.delta_g, events[i])

        # phase 2: kinematics, in index order
        pre_nearest_space: list[tuple[int, float] | None] = [None] * len(self.agents)
        for i, action in enumerate(actions):
            agent = self.agents[i]
            if cfg._dynamicGoals and agent.goal_space is None and agent.tracker:
                best = None
                for sid in agent.tracker.slots:
                    if sid is None:
                        continue
                    sp = self.world.spaces[sid]
                    d = math.hypot(sp.x - agent.body.x, sp.y - agent.body.y)
                    if best is None or d < best[1]:
                        best = (sid, d)
                pre_nearest_space[i] = best
            agent.v = clamp_velocity(
                agent.v, action.accel,
                cfg._maxVelocityMagnitude, cfg._minVelocityMagnitude)
            pose = motion_step(agent.body.pose, agent.v, action.omega, self.grid)
            agent.body.x, agent.body.y, agent.body.theta = pose.x, pose.y, pose.theta
            events[i].omega = action.omega
            events[i].velocity = agent.v

        # phase 3: collisions on post-move poses
        crashed: dict[int, str] = {}
        for i, agent in enumerate(self.agents):
            kind = self._static_hit(agent.body.x, agent.body.y, agent.body.theta)
            if kind is not None:
                crashed[i] = kind
        for i in range(len(self.agents)):
            for j in range(i + 1, len(self.agents)):
                if obb_intersects(self.agents[i].body, self.agents[j].body,
                                  self.grid):
                    crashed.setdefault(i, "agent-car")
                    crashed.setdefault(j, "agent-car")

        # phase 4: tracking refresh, lost goals, park checks, rewards
        outcomes: list[StepOutcome] = []
        terminals: list[tuple[int, str]] = []
        occupied_ids = self.world.occupied_space_ids() if cfg._dynamicGoals else set()
        for i, agent in enumerate(self.agents):
            ev = events[i]
            agent.episode_step += 1
            if agent.tracker:
                self._refresh_tracking(i)
            if self.ring_spec:
                prev = agent.cur_rings
                agent.cur_rings = self._ring_counts(i)
                if self.ring_spec.history_len > 0:
                    agent.ring_history.insert(0, prev)
                    del agent.ring_history[self.ring_spec.history_len:]
            if cfg._dynamicGoals and agent.goal_space is not None and i not in crashed:
                occupied = agent.goal_space in occupied_ids
                untracked = agent.tracker.slot_of(agent.goal_space) is None
                if occupied or untracked:
                    agent.goal_space = None
                    ev.lost_goal = True
                    self.stats["lost_goal"] += 1
            # movement bookkeeping covers terminal steps too
            if agent.goal_space is not None:
                new_d = self._goal_distance(agent)
                moved = agent.prev_goal_distance - new_d
                agent.prev_goal_distance = new_d
                if moved > 0:
                    ev.moved_toward_goal = 1
                    agent.steps_toward_goal += 1
                elif moved < 0:
                    ev.moved_toward_goal = -1
            elif pre_nearest_space[i] is not None:
                sid, old_d = pre_nearest_space[i]
                sp = self.world.spaces[sid]
                if math.hypot(sp.x - agent.body.x,
                              sp.y - agent.body.y) < old_d:
                    agent.steps_toward_space_exploring += 1
            terminal: str | None = None
            if i in crashed:
                ev.crash_kind = crashed[i]
                rewards[i] -= cfg.rewCrash
                terminal = "crashed"
            else:
                parked = self._parked_in_goal(agent)
                if parked:
                    ev.parked = True
                    ev.park_velocity = agent.v
                    rewards[i] += self._park_reward(agent)
                    terminal = "parked"
                else:
                    rewards[i] += self._dense_reward(i, actions[i], ev)
                    if agent.episode_step >= tau:
                        ev.halted = True
                        terminal = "timeout"
            ev.exploring = agent.goal_space is None and cfg._dynamicGoals
            if ev.exploring:
                agent.steps_exploring += 1
            agent.episode_reward += rewards[i]
            if terminal:
                terminals.append((i, terminal))
                self._finish_episode(i, terminal, ev)
            outcomes.append(StepOutcome(rewards[i], terminal, ev))

        # phase 5: respawns (park relocation first)
        filled: list[int] = []
        for i, terminal in terminals:
            agent = self.agents[i]
            if terminal == "parked":
                self.world.relocate_furthest_parked_car(agent.goal_space)
                filled.append(agent.goal_space)
            self._respawn(i)
        # a relocation may occupy a space another agent targets; that goal
        # is lost in the same tick
        if filled:
            done = {i for i, _ in terminals}
            for i, agent in enumerate(self.agents):
                if i not in done and agent.goal_space in filled:
                    agent.goal_space = None
                    events[i].lost_goal = True
                    self.stats["lost_goal"] += 1
        return outcomes

    def step(self, action: ActionTuple) -> StepOutcome:
        """Single-agent convenience wrapper."""
        return self.step_all([action])[0]

    # --------------------------------------------------------------- rewards

    def _parked_in_goal(self, agent: AgentState) -> bool:
        if agent.goal_space is None:
            return False
        sp = self.world.spaces[agent.goal_space]
        dx, dy = agent.body.x - sp.x, agent.body.y - sp.y
        if dx * dx + dy * dy > PARK_CENTER_THRESHOLD * PARK_CENTER_THRESHOLD:
            return False
        return self._pose_fits_space(agent)

    def _park_reward(self, agent: AgentState) -> float:
        cfg = self.cfg
        reward = cfg.rewReachGoal
        vmax = max(cfg._maxVelocityMagnitude, cfg._minVelocityMagnitude)
        if cfg.rewFinalVelocitySum > 0 and vmax > 0:
            reward -= cfg.rewFinalVelocitySum * abs(agent.v) / vmax
        if cfg.rewDeltaThetaSum > 0:
            sp = self.world.spaces[agent.goal_space]
            delta = wrap_signed_index(
                agent.body.theta - sp.theta, self.grid.theta_granularity)
            reward -= (cfg.rewDeltaThetaSum * abs(delta)
                       / (self.grid.theta_granularity / 2.0))
        return reward

    def _pose_fits_space(self, agent: AgentState) -> bool:
        sp = self.world.spaces[agent.goal_space]
        fx, fy = heading_vector(sp.theta, self.grid)
        for px, py in obb_corners(agent.body, self.grid):
            lx, ly = px - sp.x, py - sp.y
            lf = lx * fx + ly * fy
            lr = lx * fy - ly * fx
            if abs(lf) > sp.half_depth or abs(lr) > sp.half_width:
                return False
        return True

    def _dense_reward(self, agent_i: int, action: ActionTuple,
                      ev: StepEvents) -> float:
        cfg = self.cfg
        agent = self.agents[agent_i]
        tau = cfg._maxSteps
        reward = -cfg.rewTimeSum / tau
        if agent.goal_space is not None and ev.moved_toward_goal:
            reward += ev.moved_toward_goal * cfg.rewDistSum / tau
        if agent.v < 0 and cfg.rewReverseSum > 0:
            reward -= cfg.rewReverseSum / tau
        if cfg.rewDeltaThetaSum > 0 and cfg._maxDeltaThetaMagnitude > 0:
            smooth = abs(action.omega) / cfg._maxDeltaThetaMagnitude
            if cfg._rewDeltaThetaVelMult:
                vmax = max(cfg._maxVelocityMagnitude,
                           cfg._minVelocityMagnitude, 1)
                smooth *= abs(agent.v) / vmax
            reward -= cfg.rewDeltaThetaSum / tau * smooth
        return reward

    def _finish_episode(self, agent_i: int, terminal: str, ev: StepEvents) -> None:
        agent = self.agents[agent_i]
        self.stats["episodes"] += 1
        if terminal == "parked":
            self.stats["parked"] += 1
        elif terminal == "timeout":
            self.stats["halted"] += 1
        else:
            self.stats["crashed"] += 1
            self.stats[{
                "wall": "crash_wall",
                "parked-car": "crash_parked",
                "agent-car": "crash_agent",
            }[ev.crash_kind]] += 1
        n = agent.episode_step
        ev.episode_steps = n
        ev.episode_reward = agent.episode_reward
        if self.cfg._dynamicGoals:
            ev.ratio_explore = agent.steps_exploring / n
            ev.ratio_toward_space_exploring = agent.steps_toward_space_exploring / n
        ev.ratio_toward_goal = agent.steps_toward_goal / n

    # ------------------------------------------------------------- metrics

    def nearest_car_distance(self, agent_i: int) -> float:
        """Center distance to the closest other car; arena diagonal when
        there are no other cars."""
        return self._nearest_car_distance(agent_i)
