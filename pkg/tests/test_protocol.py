import dataclasses

import numpy as np
import pytest

from bufsecagg.field import FieldVector, QuantizerConfig
from bufsecagg.prg import Seed, expand
from bufsecagg.protocol import (
    ProtocolViolation,
    ServerBusy,
    ServerEngine,
    UploadMsg,
    UserAbort,
    UserScript,
    collusion_view,
    run_round,
    unmask_aggregate,
    user_run,
)
from bufsecagg.training import StalenessFn
from bufsecagg.vault import AccessDenied, Attribute, AttributeAuthority

CFG = QuantizerConfig()
POLY = StalenessFn.polynomial()
CONST = StalenessFn.constant()


def make_engine(buffer_size, dim, timeout=30.0, aa=None):
    aa = aa or AttributeAuthority()
    return ServerEngine(aa, buffer_size=buffer_size, dim=dim, modulus=CFG.modulus, timeout=timeout)


def field_sum(vectors, dim, q):
    if not vectors:
        return FieldVector.zeros(dim, q)
    stacked = np.stack([v.values for v in vectors])
    return FieldVector(stacked.sum(axis=0) % q, q)


def drive_round(engine, updates, drops=(), seed=0, quant_seed=1):
    scripts = []
    drops = set(drops)
    i = 0
    for upd in updates:
        while i in drops:
            scripts.append(UserScript(update=upd, drop="before-key"))
            drops.discard(i)
            i += 1
        scripts.append(UserScript(update=upd))
        i += 1
    return run_round(
        engine,
        engine.aa.pp,
        scripts,
        CFG,
        CONST,
        np.random.default_rng(seed),
        np.random.default_rng(quant_seed),
    )


class TestServerFlow:
    def test_first_grant_is_slot_zero_with_empty_incoming(self):
        engine = make_engine(3, 4)
        grant = engine.on_connect(0.0)
        assert grant.slot == 0
        assert grant.incoming == ()
        assert grant.round_id == 0
        assert len(grant.attribute_keys) == 3

    def test_connect_while_pending_is_busy(self):
        engine = make_engine(3, 4)
        engine.on_connect(0.0)
        with pytest.raises(ServerBusy):
            engine.on_connect(1.0)

    def test_second_grant_carries_first_users_seed(self):
        engine = make_engine(3, 4)
        grant0 = engine.on_connect(0.0)
        msg, _ = user_run(np.ones(4), 0, grant0, engine.aa, engine.aa.pp, CFG, CONST,
                          rng=np.random.default_rng(0))
        engine.on_upload(msg)
        grant1 = engine.on_connect(1.0)
        assert grant1.slot == 1
        assert len(grant1.incoming) == 1
        assert grant1.incoming[0].attribute == Attribute(0, 1)
        assert grant1.incoming[0].origin_slot == 0

    def test_upload_without_grant_rejected(self):
        engine = make_engine(2, 4)
        msg = UploadMsg(FieldVector.zeros(4, CFG.modulus), 1.0, ())
        with pytest.raises(ProtocolViolation, match="pending"):
            engine.on_upload(msg)

    def test_single_slot_buffer_passes_update_through(self):
        engine = make_engine(1, 6)
        grant = engine.on_connect(0.0)
        update = np.linspace(-1, 1, 6)
        msg, log = user_run(update, 0, grant, engine.aa, engine.aa.pp, CFG, CONST,
                            rng=np.random.default_rng(0))
        assert msg.outgoing == ()
        assert msg.masked_update == log.quantized  # no pairwise terms exist
        result = engine.on_upload(msg)
        assert result is not None
        assert result.aggregate == log.quantized
        assert result.contributor_count == 1

    def test_commit_advances_round_and_regenerates_attributes(self):
        engine = make_engine(1, 4)
        keys0 = list(engine.state.attribute_keys)
        grant = engine.on_connect(0.0)
        msg, _ = user_run(np.zeros(4), 0, grant, engine.aa, engine.aa.pp, CFG, CONST,
                          rng=np.random.default_rng(0))
        result = engine.on_upload(msg)
        assert result.round_id == 0
        st = engine.state
        assert st.round_id == 1
        assert st.cursor == 0
        assert st.staleness_sum == 0.0
        assert np.all(st.accumulator.values == 0)
        assert all(len(buf) == 0 for buf in st.ciphertext_buffers)
        assert st.attribute_keys[0] != keys0[0]  # new round, new key material

    def test_buffer_invariants_mid_round(self):
        engine = make_engine(4, 3)
        rng = np.random.default_rng(5)
        for arrival in range(4):
            grant = engine.on_connect(float(arrival))
            st = engine.state
            assert st.pending is not None and st.pending.slot == st.cursor
            msg, _ = user_run(rng.normal(size=3), 0, grant, engine.aa, engine.aa.pp,
                              CFG, CONST, rng=rng)
            engine.on_upload(msg)
            st = engine.state
            for j, buf in enumerate(st.ciphertext_buffers):
                assert len(buf) <= st.cursor
                for sealed in buf:
                    assert sealed.attribute.slot == j
                    assert sealed.origin_slot < j


class TestThreeUserCase:
    def test_masks_cancel_exactly(self):
        engine = make_engine(3, 16)
        rng = np.random.default_rng(2)
        updates = [rng.normal(size=16) for _ in range(3)]
        tr = drive_round(engine, updates)
        assert tr.result is not None
        expected = field_sum([r.quantized for r in tr.records], 16, CFG.modulus)
        assert tr.result.aggregate == expected

    def test_intermediate_uploads_are_masked(self):
        engine = make_engine(3, 16)
        rng = np.random.default_rng(3)
        tr = drive_round(engine, [rng.normal(size=16) for _ in range(3)])
        for rec in tr.records[:-1]:
            assert rec.masked != rec.quantized

    def test_last_slot_sends_no_seeds_and_unmasks_in_place(self):
        engine = make_engine(3, 8)
        rng = np.random.default_rng(4)
        for _ in range(2):
            grant = engine.on_connect(0.0)
            msg, _ = user_run(rng.normal(size=8), 0, grant, engine.aa, engine.aa.pp,
                              CFG, CONST, rng=rng)
            engine.on_upload(msg)
        grant = engine.on_connect(2.0)
        assert grant.slot == 2
        assert len(grant.incoming) == 2
        msg, log = user_run(rng.normal(size=8), 0, grant, engine.aa, engine.aa.pp,
                            CFG, CONST, rng=rng)
        assert msg.outgoing == ()
        assert log.outgoing_seeds == {}


class TestTimeouts:
    def test_timeout_regrants_same_slot_and_incoming(self):
        engine = make_engine(3, 4)
        rng = np.random.default_rng(0)
        grant0 = engine.on_connect(0.0)
        msg, _ = user_run(np.ones(4), 0, grant0, engine.aa, engine.aa.pp, CFG, CONST, rng=rng)
        engine.on_upload(msg)
        g1 = engine.on_connect(1.0)
        assert engine.on_timeout(g1.deadline) is True
        g2 = engine.on_connect(40.0)
        assert g2.slot == g1.slot == 1
        assert g2.incoming == g1.incoming
        assert g2.token != g1.token

    def test_three_timeouts_leave_cursor_alone(self):
        engine = make_engine(3, 4)
        before = engine.state.accumulator.copy()
        for i in range(3):
            g = engine.on_connect(i * 100.0)
            engine.on_timeout(g.deadline)
        assert engine.state.cursor == 0
        assert engine.state.accumulator == before

    def test_timeout_without_pending_is_noop(self):
        engine = make_engine(2, 4)
        assert engine.on_timeout(1e9) is False

    def test_timeout_before_deadline_is_noop(self):
        engine = make_engine(2, 4, timeout=30.0)
        engine.on_connect(0.0)
        assert engine.on_timeout(10.0) is False
        assert engine.state.pending is not None

    def test_stranded_user_cannot_claim_key_after_regrant(self):
        engine = make_engine(2, 4)
        ghost = engine.on_connect(0.0)
        engine.on_timeout(ghost.deadline)
        fresh = engine.on_connect(50.0)
        msg, _ = user_run(np.ones(4), 0, fresh, engine.aa, engine.aa.pp, CFG, CONST,
                          rng=np.random.default_rng(0))
        with pytest.raises(UserAbort, match="refused"):
            user_run(np.ones(4), 0, ghost, engine.aa, engine.aa.pp, CFG, CONST,
                     rng=np.random.default_rng(1))
        engine.on_upload(msg)


class TestViolations:
    def _granted(self, buffer_size=3, dim=4):
        engine = make_engine(buffer_size, dim)
        grant = engine.on_connect(0.0)
        msg, _ = user_run(np.ones(dim), 0, grant, engine.aa, engine.aa.pp, CFG, CONST,
                          rng=np.random.default_rng(0))
        return engine, grant, msg

    def test_extra_ciphertext_rejected(self):
        engine, _, msg = self._granted()
        extra = msg.outgoing + (msg.outgoing[0],)
        with pytest.raises(ProtocolViolation, match="sealed seeds"):
            engine.on_upload(dataclasses.replace(msg, outgoing=extra))

    def test_missing_ciphertext_rejected(self):
        engine, _, msg = self._granted()
        with pytest.raises(ProtocolViolation, match="sealed seeds"):
            engine.on_upload(dataclasses.replace(msg, outgoing=msg.outgoing[:1]))

    def test_misaddressed_ciphertext_rejected(self):
        engine, _, msg = self._granted()
        swapped = (msg.outgoing[1], msg.outgoing[0])
        with pytest.raises(ProtocolViolation, match="addressed"):
            engine.on_upload(dataclasses.replace(msg, outgoing=swapped))

    def test_dimension_mismatch_rejected(self):
        engine, _, msg = self._granted(dim=4)
        bad = dataclasses.replace(msg, masked_update=FieldVector.zeros(5, CFG.modulus))
        with pytest.raises(ProtocolViolation, match="dim"):
            engine.on_upload(bad)

    def test_nonpositive_staleness_rejected(self):
        engine, _, msg = self._granted()
        with pytest.raises(ProtocolViolation, match="staleness"):
            engine.on_upload(dataclasses.replace(msg, staleness=0.0))

    def test_violation_does_not_consume_slot(self):
        engine, grant, msg = self._granted()
        with pytest.raises(ProtocolViolation):
            engine.on_upload(dataclasses.replace(msg, outgoing=()))
        assert engine.state.cursor == 0
        assert engine.state.pending is None
        regrant = engine.on_connect(5.0)
        assert regrant.slot == grant.slot
        retry, _ = user_run(np.ones(4), 0, regrant, engine.aa, engine.aa.pp, CFG, CONST,
                            rng=np.random.default_rng(2))
        engine.on_upload(retry)
        assert engine.state.cursor == 1


class TestUserRun:
    def test_future_local_timestamp_aborts(self):
        engine = make_engine(2, 4)
        grant = engine.on_connect(0.0)
        with pytest.raises(UserAbort, match="ahead"):
            user_run(np.ones(4), 3, grant, engine.aa, engine.aa.pp, CFG, POLY)

    def test_zero_staleness_weight_is_one(self):
        engine = make_engine(1, 4)
        grant = engine.on_connect(0.0)
        msg, log = user_run(np.ones(4), 0, grant, engine.aa, engine.aa.pp, CFG, POLY,
                            rng=np.random.default_rng(0))
        assert msg.staleness == 1.0
        assert log.alpha == 1.0

    def test_staleness_weight_applied_before_quantization(self):
        engine = make_engine(1, 4)
        # round 3: connect three users through three rounds of size 1
        for _ in range(3):
            g = engine.on_connect(0.0)
            m, _ = user_run(np.zeros(4), g.round_id, g, engine.aa, engine.aa.pp, CFG, POLY,
                            rng=np.random.default_rng(0))
            engine.on_upload(m)
        grant = engine.on_connect(0.0)
        assert grant.round_id == 3
        msg, log = user_run(np.full(4, 2.0), 0, grant, engine.aa, engine.aa.pp, CFG, POLY,
                            rng=np.random.default_rng(1))
        assert msg.staleness == pytest.approx(0.5)  # (1 + 3) ** -0.5
        expected = np.full(4, 1.0) * CFG.scale  # alpha * update lands on the grid
        assert np.array_equal(log.quantized.values, expected.astype(np.int64))

    def test_undecryptable_incoming_aborts(self):
        engine = make_engine(2, 4)
        g0 = engine.on_connect(0.0)
        msg, _ = user_run(np.ones(4), 0, g0, engine.aa, engine.aa.pp, CFG, CONST,
                          rng=np.random.default_rng(0))
        engine.on_upload(msg)
        g1 = engine.on_connect(1.0)
        corrupted = dataclasses.replace(
            g1.incoming[0], ciphertext=bytes(len(g1.incoming[0].ciphertext))
        )
        bad_grant = dataclasses.replace(g1, incoming=(corrupted,))
        with pytest.raises(UserAbort, match="failed to open"):
            user_run(np.ones(4), 0, bad_grant, engine.aa, engine.aa.pp, CFG, CONST,
                     rng=np.random.default_rng(1))


class TestUnmask:
    def _run(self, updates, staleness_fn=CONST, timestamps=None, dim=None):
        dim = dim or len(updates[0])
        engine = make_engine(len(updates), dim)
        scripts = [
            UserScript(update=u, local_timestamp=(timestamps[i] if timestamps else 0))
            for i, u in enumerate(updates)
        ]
        return run_round(engine, engine.aa.pp, scripts, CFG, staleness_fn,
                         np.random.default_rng(0), np.random.default_rng(1))

    def test_equal_updates_average_to_themselves(self):
        v = np.linspace(-3, 3, 10)
        tr = self._run([v, v])
        out = unmask_aggregate(tr.result, CFG)
        assert np.all(np.abs(out - v) <= 2.0 / CFG.scale)

    def test_single_contributor(self):
        v = np.linspace(-1, 1, 8)
        tr = self._run([v])
        out = unmask_aggregate(tr.result, CFG)
        assert np.all(np.abs(out - v) <= 1.0 / CFG.scale)

    def test_weighted_mean_of_equal_vectors(self):
        # staleness 0 and 3 give weights 1 and 0.5 under the polynomial family
        v = np.linspace(-2, 2, 6)
        engine = make_engine(2, 6)
        for rnd in range(3):  # burn three rounds so stale timestamps exist
            for _ in range(2):
                g = engine.on_connect(0.0)
                m, _ = user_run(np.zeros(6), g.round_id, g, engine.aa, engine.aa.pp,
                                CFG, POLY, rng=np.random.default_rng(rnd))
                engine.on_upload(m)
        assert engine.state.round_id == 3
        g0 = engine.on_connect(0.0)
        m0, _ = user_run(v, 3, g0, engine.aa, engine.aa.pp, CFG, POLY,
                         rng=np.random.default_rng(3))
        engine.on_upload(m0)
        g1 = engine.on_connect(1.0)
        m1, _ = user_run(v, 0, g1, engine.aa, engine.aa.pp, CFG, POLY,
                         rng=np.random.default_rng(4))
        result = engine.on_upload(m1)
        assert m0.staleness == 1.0
        assert m1.staleness == pytest.approx(0.5)
        assert result.staleness_total == pytest.approx(1.5)
        out = unmask_aggregate(result, CFG)
        bound = 2.0 / (CFG.scale * result.staleness_total)
        assert np.all(np.abs(out - v) <= bound)

    def test_zero_staleness_total_rejected(self):
        from bufsecagg.protocol import RoundResult

        result = RoundResult(FieldVector.zeros(2, CFG.modulus), 0.0, 0, 1)
        with pytest.raises(ValueError, match="positive"):
            unmask_aggregate(result, CFG)


class TestCollusionView:
    def _transcript(self, K=4, dim=12, seed=0, quant_seed=1, n_scripts=None):
        engine = make_engine(K, dim)
        rng = np.random.default_rng(100)
        updates = [rng.normal(size=dim) for _ in range(n_scripts or K)]
        scripts = [UserScript(update=u) for u in updates]
        tr = run_round(engine, engine.aa.pp, scripts, CFG, CONST,
                       np.random.default_rng(seed), np.random.default_rng(quant_seed))
        return tr

    def _honest_prefix_sum(self, tr, colluders, prefix):
        vecs = [r.quantized for r in tr.records[:prefix] if r.slot not in colluders]
        return field_sum(vecs, tr.dim, tr.modulus)

    def test_all_later_slots_colluding_reveals_prefix_sum(self):
        tr = self._transcript(K=4)
        colluders = {2, 3}
        view = collusion_view(tr, colluders, prefix=2)
        assert view == self._honest_prefix_sum(tr, colluders, 2)

    def test_mixed_colluders_on_both_sides(self):
        tr = self._transcript(K=5)
        colluders = {1, 3, 4}  # every slot > 2 plus one inside the prefix
        view = collusion_view(tr, colluders, prefix=3)
        assert view == self._honest_prefix_sum(tr, colluders, 3)

    def test_live_honest_mask_keeps_view_random(self):
        tr = self._transcript(K=4)
        view = collusion_view(tr, {3}, prefix=2)  # slot 2 honest and beyond prefix
        assert view != self._honest_prefix_sum(tr, {3}, 2)

    def test_view_depends_on_honest_seeds_not_updates(self):
        a = self._transcript(K=4, seed=0, quant_seed=9)
        b = self._transcript(K=4, seed=1, quant_seed=9)
        # same updates and quantization stream: inputs identical
        for ra, rb in zip(a.records, b.records):
            assert ra.quantized == rb.quantized
        va = collusion_view(a, set(), prefix=2)
        vb = collusion_view(b, set(), prefix=2)
        assert va != vb

    def test_no_colluders_full_prefix_equals_aggregate(self):
        tr = self._transcript(K=3)
        assert collusion_view(tr, set(), prefix=3) == tr.result.aggregate

    def test_partial_round_transcript(self):
        tr = self._transcript(K=5, n_scripts=3)  # round never commits
        assert tr.result is None
        assert len(tr.records) == 3
        view = collusion_view(tr, {3, 4}, prefix=3)
        assert view == self._honest_prefix_sum(tr, {3, 4}, 3)

    def test_prefix_beyond_transcript_rejected(self):
        tr = self._transcript(K=3)
        with pytest.raises(ValueError, match="prefix"):
            collusion_view(tr, set(), prefix=4)


class TestCancellationProperty:
    @pytest.mark.parametrize("trial", range(25))
    def test_random_configs_with_drops(self, trial):
        rng = np.random.default_rng(1000 + trial)
        K = int(rng.integers(1, 17))
        dim = int(rng.integers(1, 257))
        engine = make_engine(K, dim)
        scripts = []
        committed_updates = []
        slots_filled = 0
        while slots_filled < K:
            update = rng.normal(scale=5.0, size=dim)
            if rng.random() < 0.25:
                scripts.append(
                    UserScript(update=update, drop=rng.choice(["before-key", "after-key"]))
                )
            else:
                scripts.append(UserScript(update=update))
                committed_updates.append(update)
                slots_filled += 1
        tr = run_round(engine, engine.aa.pp, scripts, CFG, CONST,
                       np.random.default_rng(trial), np.random.default_rng(trial + 1))
        assert tr.result is not None
        expected = field_sum([r.quantized for r in tr.records], dim, CFG.modulus)
        assert tr.result.aggregate == expected
        assert tr.result.staleness_total == pytest.approx(float(K))
