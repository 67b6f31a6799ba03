import random

import pytest
from hypothesis import given, strategies as st

from paradec.denoisers import OracleDenoiser, OracleParams, ScriptedDenoiser
from paradec.sequence import (
    DistillationRecord,
    NoiseSpec,
    Schedule,
    SequenceError,
    Trajectory,
    Vocab,
    build_noisy_sequence,
    curriculum_noise,
    curriculum_window,
    dumps_jsonl,
    emit_records,
    loads_jsonl,
    record_teacher_trajectory,
    trajectory_from_json,
    trajectory_to_json,
    unmasked_set,
    validate_trajectory,
)
from oracles import noisy_reference

V = Vocab.standard(32)
M = V.mask_id
TRUTH = (11, 12, 13, 14, 15, 16)
ORDER = (1, 2, 4, 3, 6, 5)
TRAJ = Trajectory(ORDER, TRUTH)


class TestVocab:
    def test_standard_layout(self):
        assert (V.mask_id, V.eos_id) == (31, 30)
        assert M not in V.content_tokens() and V.eos_id not in V.content_tokens()

    @pytest.mark.parametrize("size,mask,eos", [(3, 0, 1), (8, 2, 2), (8, 8, 1), (8, 1, -1)])
    def test_invalid(self, size, mask, eos):
        with pytest.raises(SequenceError):
            Vocab(size, mask, eos)


class TestTrajectory:
    def test_valid(self):
        assert validate_trajectory(Trajectory((1, 2, 3), (5, 6, 7)), 3) is None

    def test_duplicate(self):
        assert validate_trajectory(Trajectory((1, 1, 3), (5, 6, 7)), 3) == "duplicate position 1"

    def test_masked_truth(self):
        msg = validate_trajectory(Trajectory((1, 2, 3), (5, M, 7)), 3, mask_id=M)
        assert msg is not None and "position 2" in msg

    def test_out_of_range_and_length(self):
        assert "out of range" in validate_trajectory(Trajectory((1, 2, 4), (5, 6, 7)), 3)
        assert "length" in validate_trajectory(Trajectory((1, 2), (5, 6)), 3)

    def test_unmasked_set(self):
        assert unmasked_set(TRAJ, 4) == {1, 2, 3, 4}
        assert unmasked_set(TRAJ, 0) == set()
        assert unmasked_set(TRAJ, 6) == set(range(1, 7))
        with pytest.raises(SequenceError):
            unmasked_set(TRAJ, 7)

    @given(st.permutations(list(range(1, 11))))
    def test_nesting(self, order):
        traj = Trajectory(tuple(order), tuple(range(10)))
        prev = frozenset()
        for i in range(11):
            cur = unmasked_set(traj, i)
            assert len(cur) == i and prev <= cur
            prev = cur


class TestNoisySequence:
    def test_half_noise(self):
        noisy, labels = build_noisy_sequence(TRUTH, TRAJ, NoiseSpec(2, 3, 0.5), V)
        assert noisy == (11, 12, 13, 14, M, M)
        assert labels == (5,)

    def test_zero_noise(self):
        noisy, labels = build_noisy_sequence(TRUTH, TRAJ, NoiseSpec(2, 3, 0.0), V)
        assert noisy == (11, 12, M, M, M, M)
        assert labels == (3, 4, 5)

    def test_tail_mask_overrides_trajectory(self):
        noisy, labels = build_noisy_sequence(TRUTH, TRAJ, NoiseSpec(2, 3, 1.0), V)
        assert 6 in unmasked_set(TRAJ, 5)
        assert noisy == (11, 12, 13, 14, M, M)
        assert labels == (5,)

    @pytest.mark.parametrize("s,k,t", [(4, 3, 0.5), (-1, 2, 0.5), (0, 0, 0.5), (0, 2, 1.5)])
    def test_invalid_window(self, s, k, t):
        with pytest.raises(SequenceError):
            build_noisy_sequence(TRUTH, TRAJ, NoiseSpec(s, k, t), V)

    def test_ceiling_is_robust_to_float_noise(self):
        # 24 * 0.4 evaluates to 9.600000000000001; 10 * 0.3 to 3.0000000000000004
        assert NoiseSpec(0, 10, 0.3).reveal_step() == 3
        assert NoiseSpec(0, 24, 0.4).reveal_step() == 10

    def test_matches_reference_exhaustively(self):
        rng = random.Random(7)
        for n in range(1, 9):
            truth = tuple(rng.randrange(30) for _ in range(n))
            order = list(range(1, n + 1))
            rng.shuffle(order)
            traj = Trajectory(tuple(order), truth)
            for s in range(n):
                for k in range(1, n - s + 1):
                    for j in range(k + 1):
                        t = j / k
                        got = build_noisy_sequence(truth, traj, NoiseSpec(s, k, t), V)
                        want = noisy_reference(truth, order, s, k, t, M)
                        assert (list(got[0]), list(got[1])) == want

    @given(st.integers(1, 16).flatmap(lambda n: st.tuples(
        st.permutations(list(range(1, n + 1))),
        st.integers(0, n - 1), st.floats(0, 1))), st.data())
    def test_window_partition(self, case, data):
        order, s, t = case
        n = len(order)
        k = data.draw(st.integers(1, n - s))
        truth = tuple(range(n))
        noisy, labels = build_noisy_sequence(truth, Trajectory(tuple(order), truth), NoiseSpec(s, k, t), V)
        revealed = {i for i in range(s + 1, s + k + 1) if noisy[i - 1] != M}
        assert revealed | set(labels) == set(range(s + 1, s + k + 1))
        assert not revealed & set(labels)
        assert all(noisy[i] == truth[i] for i in range(s))
        assert all(tok == M for tok in noisy[s + k:])

    @given(st.integers(1, 16), st.data())
    def test_left_to_right_reveals_ceil_kt(self, n, data):
        s = data.draw(st.integers(0, n - 1))
        k = data.draw(st.integers(1, n - s))
        t = data.draw(st.floats(0, 1))
        truth = tuple(range(n))
        spec = NoiseSpec(s, k, t)
        noisy, labels = build_noisy_sequence(truth, Trajectory(tuple(range(1, n + 1)), truth), spec, V)
        assert k - len(labels) == min(spec.reveal_step() - s, k)


class TestCurricula:
    def test_noise_endpoints(self):
        assert curriculum_noise(0) == 0.0
        assert curriculum_noise(1) == 0.8
        assert curriculum_noise(0.5) == 0.4

    def test_window_endpoints(self):
        assert curriculum_window(0) == 16
        assert curriculum_window(1) == 32
        assert curriculum_window(0.5) == 24

    def test_window_rounds_half_up(self):
        assert curriculum_window(0.5, 1, 2) == 2
        assert curriculum_window(0.5, 2, 3) == 3

    @pytest.mark.parametrize("p", [-0.1, 1.1])
    def test_bad_progress(self, p):
        with pytest.raises(SequenceError):
            curriculum_noise(p)
        with pytest.raises(SequenceError):
            curriculum_window(p)

    def test_bad_bounds(self):
        with pytest.raises(SequenceError):
            curriculum_noise(0.5, 0.8, 0.2)
        with pytest.raises(SequenceError):
            curriculum_window(0.5, 0, 4)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert curriculum_noise(lo) <= curriculum_noise(hi)
        assert curriculum_window(lo) <= curriculum_window(hi)


class TestRecords:
    PAIR = ((1, 2), tuple(range(40)))
    TRAJ40 = Trajectory(tuple(range(1, 41)), tuple(range(40)))

    def test_single_record(self):
        (rec,) = emit_records([self.PAIR], [self.TRAJ40], Schedule(0.1, 0.8, 16, 32), 1, V)
        assert (rec.t, rec.k, rec.step_index) == (0.1, 16, 0)

    def test_three_records_follow_schedule(self):
        recs = list(emit_records([self.PAIR], [self.TRAJ40], Schedule(), 3, V))
        assert [r.t for r in recs] == [0.0, 0.4, 0.8]
        assert [r.k for r in recs] == [16, 24, 32]

    def test_deterministic(self):
        a = dumps_jsonl(r.to_json(M) for r in emit_records([self.PAIR], [self.TRAJ40], Schedule(), 20, V, seed=3))
        b = dumps_jsonl(r.to_json(M) for r in emit_records([self.PAIR], [self.TRAJ40], Schedule(), 20, V, seed=3))
        assert a == b

    def test_record_invariants(self):
        for rec in emit_records([self.PAIR], [self.TRAJ40], Schedule(), 50, V, seed=1):
            window = set(range(rec.s + 1, rec.s + rec.k + 1))
            assert set(rec.label_positions) <= window
            assert all(rec.noisy[p - 1] == M for p in rec.label_positions)
            assert rec.labels == tuple(self.PAIR[1][p - 1] for p in rec.label_positions)

    def test_alignment_error(self):
        with pytest.raises(SequenceError):
            list(emit_records([self.PAIR], [TRAJ], Schedule(), 1, V))
        with pytest.raises(SequenceError):
            list(emit_records([self.PAIR], [], Schedule(), 1, V))

    def test_window_clipped_to_length(self):
        recs = list(emit_records([((), TRUTH)], [TRAJ], Schedule(), 3, V))
        assert all(r.k == 6 for r in recs)

    def test_json_round_trip(self):
        rec = next(emit_records([self.PAIR], [self.TRAJ40], Schedule(), 1, V))
        doc = rec.to_json(M)
        assert -1 in doc["noisy"] and M not in doc["noisy"]
        assert DistillationRecord.from_json(doc, M) == rec

    def test_trajectory_jsonl(self):
        text = dumps_jsonl([trajectory_to_json((1, 2), TRAJ)])
        (obj,) = loads_jsonl(text)
        assert set(obj) == {"prompt", "truth", "order"}
        assert trajectory_from_json(obj) == ((1, 2), TRAJ)


class TestTeacher:
    def test_increasing_entropies_give_left_to_right(self):
        den = ScriptedDenoiser({i: (i, 0.1 * i) for i in range(1, 6)}, V)
        traj = record_teacher_trajectory(den, (), 5, V)
        assert traj.order == (1, 2, 3, 4, 5)
        assert traj.truth == (1, 2, 3, 4, 5)

    def test_argmin_trace(self):
        den = ScriptedDenoiser({1: (7, 0.5), 2: (8, 0.9), 3: (9, 0.1)}, V)
        assert record_teacher_trajectory(den, (), 3, V).order == (3, 1, 2)

    def test_ties_go_to_lowest_position(self):
        den = ScriptedDenoiser({}, V, default=(4, 0.3))
        assert record_teacher_trajectory(den, (), 4, V).order == (1, 2, 3, 4)

    def test_continues_past_eos(self):
        den = ScriptedDenoiser({1: (V.eos_id, 0.0)}, V, default=(5, 0.5))
        traj = record_teacher_trajectory(den, (), 4, V)
        assert traj.truth == (V.eos_id, 5, 5, 5)

    def test_oracle_deterministic(self):
        orc = OracleDenoiser(OracleParams(), V)
        target = tuple(range(20))
        a = record_teacher_trajectory(orc, (1,), 20, V, seed=4, block_size=8, target=target)
        b = record_teacher_trajectory(orc, (1,), 20, V, seed=4, block_size=8, target=target)
        assert a == b
        assert validate_trajectory(a, 20, M) is None

    def test_failure_names_pass(self):
        den = ScriptedDenoiser({1: (1, 0.0)}, V)
        with pytest.raises(SequenceError, match="pass 1"):
            record_teacher_trajectory(den, (), 2, V)
