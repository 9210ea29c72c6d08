import pytest

from teecred.actors import BusyTa, Locked, RevocationMode
from teecred.procedures import (
    GOLDEN, ProcedureAbort, Run, StepMessage, expected_steps, open_backup, run_backup,
    run_migration, run_restore, run_revocation, run_update,
)
from teecred.simnet.adversary import AdversaryProgram, Rule
from teecred.simnet.checks import check_all

from .conftest import standard_world


def program(*rules):
    return AdversaryProgram(tuple(rules))


def test_migration_golden(world):
    creds = world.actor("ta_a").holdings()
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert out.succeeded, out
    assert out.labels == GOLDEN["migration"]
    assert len(world.actor("ta_a").holdings()) == 0
    assert world.actor("ta_b").holdings() == creds
    assert check_all(world) == []


def test_migration_step_endpoints(world):
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    ends = [(s.src, s.dst) for s in out.steps]
    assert ends[:2] == [("tsm", "ta_a"), ("tsm", "ta_a")]
    assert ends[9] == ("ta_a", "ta_b")          # 10. Transfer C
    assert ends[12] == ("ta_b", "tsm")          # 13. Success
    assert ends[15] == ("ta_a", "tsm")          # 16. Success


@pytest.mark.parametrize("mode", list(RevocationMode))
def test_revocation_golden(mode):
    world = standard_world(mode=mode)
    ta = world.actor("ta_a")
    victim = sorted(ta.holdings().ids)[0]
    out = run_revocation(world, "tsm", "ta_a", "ra", ma="ma", revoke=[victim])
    assert out.succeeded, out
    assert out.labels == GOLDEN["revocation-maintainer"] + GOLDEN["revocation"]
    assert out.detail["rc"] == {victim}
    assert victim not in ta.holdings() and len(ta.holdings()) == 2
    assert check_all(world) == []


def test_revocation_without_maintainer_phase(world):
    out = run_revocation(world, "tsm", "ta_a", "ra")
    assert out.labels == GOLDEN["revocation"]
    assert out.detail["rc"] == frozenset()


def test_malicious_ta_is_caught_and_reported():
    world = standard_world(ta_a={"malicious": True})
    ta = world.actor("ta_a")
    victim = sorted(ta.holdings().ids)[0]
    out = run_revocation(world, "tsm", "ta_a", "ra", ma="ma", revoke=[victim])
    assert out.succeeded
    assert out.labels[-2:] == GOLDEN["revocation-report"]
    assert victim in ta.holdings()
    log = world.actor("ma").report_log
    assert [(e.ta_identity.id, e.revoked_credential_id) for e in log] == [("ta_a", victim)]


def test_lost_report_ack_is_retransmitted():
    world = standard_world(ta_a={"malicious": True}, program=program(Rule({"step": "E"}, "drop")))
    victim = sorted(world.actor("ta_a").holdings().ids)[0]
    out = run_revocation(world, "tsm", "ta_a", "ra", ma="ma", revoke=[victim])
    assert out.succeeded
    assert out.labels[-4:] == ["D. Report Attempts", "E. Ack.", "D. Report Attempts", "E. Ack."]
    assert expected_steps("revocation", out.labels)
    assert len(world.actor("ma").report_log) == 1


def test_undeliverable_report_gives_warning():
    world = standard_world(ta_a={"malicious": True}, program=program(Rule({"step": "D"}, "drop", limit=0)))
    victim = sorted(world.actor("ta_a").holdings().ids)[0]
    out = run_revocation(world, "tsm", "ta_a", "ra", ma="ma", revoke=[victim])
    assert out.succeeded
    assert any("undelivered" in w for w in out.warnings)
    assert world.actor("ra").pending_reports


def test_backup_and_restore_roundtrip(world):
    ta = world.actor("ta_a")
    before = ta.holdings()
    out = run_backup(world, "tsm", "ta_a", "ba")
    assert out.succeeded and out.labels == GOLDEN["backup"]
    (entry,) = world.actor("ba").store.values()
    assert all(c.material not in entry.payload for c in before)
    assert open_backup(ta, entry.payload) == before
    ta.wipe()
    out = run_restore(world, "ba", "tsm", "ta_a")
    assert out.succeeded and out.labels == GOLDEN["restore"]
    assert ta.holdings() == before


def test_restore_preconditions(world):
    with pytest.raises(ValueError, match="empty TA"):
        run_restore(world, "ba", "tsm", "ta_a")
    world.actor("ta_b").wipe()
    with pytest.raises(ValueError, match="no backup"):
        run_restore(world, "ba", "tsm", "ta_b")


def test_backup_to_unavailable_authority_times_out(world):
    world.actor("ba").available = False
    out = run_backup(world, "tsm", "ta_a", "ba")
    assert (out.status, out.aborted_step, out.reason) == ("Aborted", "1", "Timeout")


def test_update_rotates_and_revokes(world):
    ta = world.actor("ta_a")
    old = ta.holdings()
    locked_probe = []

    def probe(run, rec):
        if run.kind == "update" and rec.step in {"6", "7", "8", "9", "10"}:
            with pytest.raises(Locked):
                ta.use_credential(sorted(ta.holdings().ids)[0])
            locked_probe.append(rec.step)

    world.step_hooks.append(probe)
    out = run_update(world, "ma", "tsm", "ta_a", "ra")
    assert out.succeeded and out.labels == GOLDEN["update"]
    assert locked_probe == ["6", "7", "8", "9", "10"]
    new = ta.holdings()
    assert new.ids.isdisjoint(old.ids) and len(new) == len(old)
    assert {c.version for c in new} == {2}
    ra = world.actor("ra")
    assert all(ra.mrl.is_revoked(cid) for cid in old.ids)
    assert not any(ra.mrl.is_revoked(cid) for cid in new.ids)
    assert not ta.locked
    assert check_all(world) == []


def test_update_subset(world):
    ta = world.actor("ta_a")
    keep, rotate = sorted(ta.holdings().ids)[:2], sorted(ta.holdings().ids)[2:]
    out = run_update(world, "ma", "tsm", "ta_a", "ra", credentials=rotate)
    assert out.succeeded
    assert set(keep) <= ta.holdings().ids
    assert not set(rotate) & ta.holdings().ids


def test_update_abort_leaves_ta_locked_with_old_credentials():
    world = standard_world(program=program(Rule({"step": "10"}, "drop")))
    ta = world.actor("ta_a")
    old = ta.holdings()
    out = run_update(world, "ma", "tsm", "ta_a", "ra")
    assert out.status == "Aborted" and out.aborted_step == "10"
    assert ta.locked and ta.holdings() == old
    assert "ta_a" in world.needs_operator_retry


def test_drop_all_aborts_at_first_step(world):
    world.network.adversary.program = program(Rule({}, "drop", limit=0))
    world.network.adversary.fired = [0]
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert (out.aborted_step, out.reason) == ("1", "Timeout")
    assert world.network.balanced()


def test_tampered_target_is_never_sent_credentials():
    world = standard_world(ta_b={"tampered": True})
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert (out.aborted_step, out.reason) == ("5", "QuoteRejected(MeasurementMismatch)")
    assert len(world.actor("ta_a").holdings()) == 3 and len(world.actor("ta_b").holdings()) == 0


def test_untrusted_identity_is_unknown_platform():
    world = standard_world(ta_b={"trusted": False})
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert out.reason == "QuoteRejected(UnknownPlatform)"


def test_dropped_step12_keeps_both_copies():
    world = standard_world(program=program(Rule({"step": "12"}, "drop")))
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert (out.aborted_step, out.reason) == ("12", "Timeout")
    assert len(world.actor("ta_a").holdings()) == 3 == len(world.actor("ta_b").holdings())
    assert len(out.warnings) == 3
    assert check_all(world) == []


def test_busy_ta_refused(world):
    world.actor("ta_a").busy = True
    with pytest.raises(BusyTa):
        run_backup(world, "tsm", "ta_a", "ba")


def test_unsigned_command_reply_rejected(world):
    run = Run(world, "migration")
    msg = StepMessage(run.name, "4", run.label("4"), {"ids": frozenset()})
    with pytest.raises(ProcedureAbort, match="BadCommandSignature"):
        run._check_command(world.actor("ta_a"), msg, "4")


def test_expected_steps_accepts_only_golden_order():
    assert expected_steps("backup", GOLDEN["backup"])
    assert not expected_steps("backup", GOLDEN["backup"][:-1])
    swapped = list(GOLDEN["update"])
    swapped[1], swapped[2] = swapped[2], swapped[1]
    assert not expected_steps("update", swapped)
    rev = GOLDEN["revocation"] + GOLDEN["revocation-report"]
    assert expected_steps("revocation", rev)
    assert not expected_steps("revocation", rev + ["9. Revoke RC"])
