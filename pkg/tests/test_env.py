import random

import numpy as np
import pytest

from conftest import FAST_TILE, synth_source
from vidatlas.env import (
    Action,
    ActionKind,
    CommitItem,
    DeadCellError,
    EnvConfig,
    InvalidActionError,
    UnknownLabelError,
    add_dead_zone,
    available_actions,
    init_env,
    observe,
    prune_evidence,
    state_hash,
    step,
)
from vidatlas.media import SubtitleCue
from vidatlas.render import tile_nonzero_fractions
from vidatlas.timeline import CellAddress, Interval, VideoSpan, cell_interval


def fresh(duration=3600.0, events=(), cues=None, config=None, mode="dfs"):
    cfg = config or EnvConfig(tile_px=FAST_TILE)
    source = synth_source(duration, events)
    return init_env(source, VideoSpan(duration, source.fps), cfg, cues, mode)


class TestInit:
    def test_root_observation(self):
        state, obs = fresh(64.0)
        assert state.depth == 0
        assert obs.position == Interval(0.0, 64.0)
        assert len(obs.cell_descriptors) == 64
        assert obs.cell_descriptors[0].interval.width == pytest.approx(1.0)

    def test_no_backtrack_at_root(self):
        _, obs = fresh()
        assert ActionKind.BACKTRACK not in obs.available_actions

    def test_memories_start_empty(self):
        state, _ = fresh()
        assert state.scratchpad == [] and state.dead_zones == []


class TestAvailableActions:
    def test_expand_gated_by_cell_span(self):
        # (T=3600, depth 1): child cells are 0.879s < 1s, so no Expand.
        state, _ = fresh(3600.0)
        step(state, Action(ActionKind.EXPAND, cell=0))
        assert state.depth == 1
        assert ActionKind.EXPAND not in available_actions(state)
        assert ActionKind.BACKTRACK in available_actions(state)

    def test_expand_present_at_root_for_long_video(self):
        state, obs = fresh(3600.0)
        assert ActionKind.EXPAND in obs.available_actions  # 56.25s cells

    def test_mark_promising_bfs_only(self):
        dfs_state, dfs_obs = fresh(mode="dfs")
        bfs_state, bfs_obs = fresh(mode="bfs")
        assert ActionKind.MARK_PROMISING not in dfs_obs.available_actions
        assert ActionKind.MARK_PROMISING in bfs_obs.available_actions

    def test_depth_cap_blocks_expand(self):
        state, _ = fresh(36000.0, config=EnvConfig(tile_px=FAST_TILE, max_depth=1))
        step(state, Action(ActionKind.EXPAND, cell=0))
        # cells at depth 1 are 8.79s >= 1s, but the cap forbids going deeper
        assert ActionKind.EXPAND not in available_actions(state)


class TestStep:
    def test_expand_matches_timeline(self):
        state, _ = fresh(3600.0)
        result = step(state, Action(ActionKind.EXPAND, cell=0))
        want = cell_interval(VideoSpan(3600.0), CellAddress((0,), 8))
        assert state.depth == 1
        assert state.position.start_s == want.start_s
        assert state.position.end_s == want.end_s
        assert result.observation is not None

    def test_backtrack_inverts_expand(self):
        state, _ = fresh(3600.0)
        before = (state.position, state.depth, list(state.nav_stack))
        step(state, Action(ActionKind.EXPAND, cell=7))
        step(state, Action(ActionKind.BACKTRACK))
        assert (state.position, state.depth, list(state.nav_stack)) == before

    def test_memories_survive_navigation(self):
        state, _ = fresh(3600.0)
        step(state, Action(ActionKind.ADD_TO_SCRATCHPAD,
                           items=(CommitItem(100.0, "thing", 0.8),)))
        add_dead_zone(state, Interval(200.0, 300.0))
        step(state, Action(ActionKind.EXPAND, cell=0))
        step(state, Action(ActionKind.BACKTRACK))
        assert len(state.scratchpad) == 1
        assert len(state.dead_zones) == 1

    def test_unavailable_action_rejected(self):
        state, _ = fresh(3600.0)
        with pytest.raises(InvalidActionError):
            step(state, Action(ActionKind.BACKTRACK))
        with pytest.raises(InvalidActionError):
            step(state, Action(ActionKind.MARK_PROMISING, cells=(1,)))

    def test_zoom_returns_midpoint_frame(self):
        state, obs = fresh(3600.0)
        result = step(state, Action(ActionKind.ZOOM, cell=3))
        assert len(result.frames) == 1
        mid = obs.cell_descriptors[3].midpoint_s
        assert result.frames[0].timestamp_s == pytest.approx(mid, abs=0.05)

    def test_zoom_blacked_cell_rejected(self):
        state, _ = fresh(3600.0)
        add_dead_zone(state, Interval(0.0, 56.25))
        with pytest.raises(DeadCellError):
            step(state, Action(ActionKind.ZOOM, cell=0))

    def test_investigate_samples_adjacent_window(self):
        state, obs = fresh(3600.0)
        cell = obs.cell_descriptors[10]
        result = step(state, Action(ActionKind.INVESTIGATE, cell=10,
                                    direction="after"))
        assert len(result.frames) == 8
        lo, hi = cell.interval.end_s, cell.interval.end_s + cell.interval.width
        for f in result.frames:
            assert lo - 0.05 <= f.timestamp_s <= hi + 0.05
        before = step(state, Action(ActionKind.INVESTIGATE, cell=10,
                                    direction="before"))
        for f in before.frames:
            assert cell.interval.start_s - cell.interval.width - 0.05 <= \
                f.timestamp_s <= cell.interval.start_s + 0.05

    def test_add_to_scratchpad_assigns_labels(self):
        cues = [SubtitleCue(1, 99.0, 101.0, "the moment")]
        state, _ = fresh(3600.0, cues=cues)
        result = step(state, Action(ActionKind.ADD_TO_SCRATCHPAD, items=(
            CommitItem(100.0, "first", 0.9), CommitItem(200.0, "second", 2.0))))
        assert result.committed_labels == ("A", "B")
        assert state.scratchpad[0].subtitle == "the moment"
        assert state.scratchpad[1].subtitle == ""
        assert state.scratchpad[1].confidence == 1.0  # clamped into [0, 1]

    def test_finished_excludes_evidence_windows(self):
        state, _ = fresh(3600.0)
        step(state, Action(ActionKind.EXPAND, cell=0))  # assigned stays [0, T)
        state.assigned_interval = Interval(0.0, 56.25)
        step(state, Action(ActionKind.ADD_TO_SCRATCHPAD,
                           items=(CommitItem(10.0, "ev", 0.9),)))
        result = step(state, Action(ActionKind.FINISHED))
        assert result.terminal
        # set-difference oracle: [0,56.25) minus [9.5,10.5)
        zones = [(z.start_s, z.end_s) for z in result.dead_zones]
        assert zones[0] == pytest.approx((0.0, 9.5))
        assert zones[1][0] == pytest.approx(10.5)
        assert zones[1][1] == pytest.approx(56.25)


class TestMemories:
    def test_dead_zone_merge(self):
        state, _ = fresh()
        add_dead_zone(state, Interval(0.0, 10.0))
        add_dead_zone(state, Interval(5.0, 20.0))
        assert [(z.interval.start_s, z.interval.end_s)
                for z in state.dead_zones] == [(0.0, 20.0)]

    def test_dead_zones_disjoint_and_sorted(self):
        state, _ = fresh()
        rng = random.Random(0)
        for _ in range(200):
            lo = rng.uniform(0, 3500)
            add_dead_zone(state, Interval(lo, lo + rng.uniform(0.1, 80)))
        zones = state.dead_zones
        for a, b in zip(zones, zones[1:]):
            assert a.interval.end_s < b.interval.start_s

    def test_dead_measure_monotone(self):
        state, _ = fresh()
        rng = random.Random(1)
        last = 0.0
        for _ in range(50):
            lo = rng.uniform(0, 3000)
            add_dead_zone(state, Interval(lo, lo + 5.0))
            measure = state.dead_measure()
            assert measure >= last - 1e-9
            last = measure

    def test_prune_keeps_labels_stable(self):
        state, _ = fresh()
        step(state, Action(ActionKind.ADD_TO_SCRATCHPAD, items=(
            CommitItem(1.0, "a", 0.5), CommitItem(2.0, "b", 0.5),
            CommitItem(3.0, "c", 0.5))))
        prune_evidence(state, ["B"])
        assert [it.label for it in state.scratchpad] == ["A", "C"]
        step(state, Action(ActionKind.ADD_TO_SCRATCHPAD,
                           items=(CommitItem(4.0, "d", 0.5),)))
        assert state.scratchpad[-1].label == "D"  # labels never reused

    def test_prune_unknown_label(self):
        state, _ = fresh()
        with pytest.raises(UnknownLabelError):
            prune_evidence(state, ["ZZ"])


class TestObserve:
    def test_fully_covered_cell_blacked(self):
        state, _ = fresh(3600.0)
        add_dead_zone(state, Interval(3.0 * 56.25, 4.0 * 56.25))
        obs = observe(state)
        assert obs.cell_descriptors[3].blacked
        fractions = tile_nonzero_fractions(obs.grid)
        assert fractions[3] == 0.0

    def test_half_covered_cell_not_blacked(self):
        state, _ = fresh(3600.0)
        add_dead_zone(state, Interval(3.0 * 56.25, 3.5 * 56.25))
        obs = observe(state)
        assert not obs.cell_descriptors[3].blacked
        assert tile_nonzero_fractions(obs.grid)[3] > 0.5

    def test_theta_boundary(self):
        cfg = EnvConfig(tile_px=FAST_TILE, blackout_theta=0.95)
        state, _ = fresh(3600.0, config=cfg)
        cell = cell_interval(VideoSpan(3600.0), CellAddress((5,), 8))
        add_dead_zone(state, Interval(cell.start_s, cell.start_s + 0.94 * cell.width))
        assert not observe(state).cell_descriptors[5].blacked
        add_dead_zone(state, Interval(cell.start_s, cell.start_s + 0.96 * cell.width))
        assert observe(state).cell_descriptors[5].blacked

    def test_subtitles_filtered_to_window(self):
        cues = [SubtitleCue(1, 10.0, 12.0, "in first cell"),
                SubtitleCue(2, 1000.0, 1002.0, "elsewhere")]
        state, _ = fresh(3600.0, cues=cues)
        step(state, Action(ActionKind.EXPAND, cell=0))
        obs = observe(state)
        assert [c.text for c in obs.subtitles] == ["in first cell"]

    def test_observation_pure_function_of_state(self):
        state, _ = fresh(600.0, events=[(300.0, "cross")])
        step(state, Action(ActionKind.EXPAND, cell=31))
        a = observe(state)
        b = observe(state)
        assert np.array_equal(a.grid.pixels, b.grid.pixels)
        assert a.available_actions == b.available_actions


class TestReplay:
    def test_action_log_replays_to_same_hashes(self):
        def run(record):
            state, _ = fresh(3600.0, events=[(700.0, "box")])
            hashes = [state_hash(state)]
            for action in record:
                step(state, action)
                hashes.append(state_hash(state))
            return hashes

        log = [
            Action(ActionKind.EXPAND, cell=12),
            Action(ActionKind.ZOOM, cell=4),
            Action(ActionKind.ADD_TO_SCRATCHPAD,
                   items=(CommitItem(700.2, "mark", 0.7),)),
            Action(ActionKind.BACKTRACK),
            Action(ActionKind.FINISHED),
        ]
        assert run(log) == run(log)


class TestConformingWalk:
    def test_random_walk_soundness(self):
        # Shorter in-suite version; the acceptance suite runs 10^4 steps.
        self.walk(steps=1200, seed=3)

    @staticmethod
    def walk(steps: int, seed: int):
        cfg = EnvConfig(k=4, tile_px=32)
        rng = random.Random(seed)
        duration = 5000.0
        state, _ = fresh(duration, config=cfg)
        all_kinds = list(ActionKind)
        taken = 0
        while taken < steps:
            acts = available_actions(state)
            obs = observe(state)
            live = [m.index for m in obs.cell_descriptors if not m.blacked]
            # exactness of the availability rules
            cell_span = state.position.width / (cfg.k ** 2)
            assert (ActionKind.EXPAND in acts) == (
                cell_span >= 1.0 and state.depth < cfg.resolved_max_depth(state.span))
            assert (ActionKind.BACKTRACK in acts) == (state.depth > 0)
            assert ActionKind.MARK_PROMISING not in acts  # dfs mode
            # a deliberately invalid pick must be rejected
            invalid = [k for k in all_kinds if k not in acts]
            if invalid and rng.random() < 0.2:
                bad = rng.choice(invalid)
                with pytest.raises(InvalidActionError):
                    step(state, Action(bad, cell=live[0] if live else 0,
                                       cells=(live[0],) if live else (0,),
                                       direction="after"))
            # then take a conforming action
            choices = [k for k in acts if k is not ActionKind.FINISHED] or [ActionKind.FINISHED]
            if not live:
                choices = [k for k in choices
                           if k in (ActionKind.BACKTRACK, ActionKind.FINISHED)]
            if not choices:
                break
            kind = rng.choice(choices)
            action = None
            if kind in (ActionKind.EXPAND, ActionKind.ZOOM):
                action = Action(kind, cell=rng.choice(live))
            elif kind is ActionKind.INVESTIGATE:
                action = Action(kind, cell=rng.choice(live),
                                direction=rng.choice(["before", "after"]))
            elif kind is ActionKind.ADD_TO_SCRATCHPAD:
                t = rng.uniform(state.position.start_s, state.position.end_s - 1e-6)
                action = Action(kind, items=(CommitItem(t, "w", rng.random()),))
            else:
                action = Action(kind)
            result = step(state, action)
            taken += 1
            assert state.depth == len(state.nav_stack)
            if state.address is not None:
                want = cell_interval(state.span, state.address)
                assert state.position.start_s == pytest.approx(want.start_s)
                assert state.position.end_s == pytest.approx(want.end_s)
            if result.terminal:
                state, _ = fresh(duration, config=cfg)
