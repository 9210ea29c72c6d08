import pytest
from hypothesis import given, settings, strategies as st

from teecred.procedures import run_backup, run_migration
from teecred.scenario import bundled, execute, load_scenario
from teecred.simnet import campaign, checks, oracles
from teecred.simnet.adversary import TAMPER_MODES, AdversaryError, AdversaryProgram, Rule
from teecred.simnet.network import HANDSHAKE, IDLE, RECORD

from .conftest import standard_world


def armed(*rules, seed=1):
    world = standard_world(seed=seed, program=AdversaryProgram(tuple(rules)))
    return world, world.network


def send(net, n=3, body=b"payload-bytes"):
    return [net.send("a", "b", RECORD, "p#1", str(i), "l", body + bytes([i])) for i in range(n)]


def pump(net):
    out = []
    while (env := net.step()) is not IDLE:
        out.append(env)
    return out


def test_network_delivers_in_sequence_order():
    _, net = armed()
    sent = send(net)
    assert [e.seq for e in pump(net)] == [e.seq for e in sent]
    assert net.step() is IDLE
    assert net.balanced()


def test_drop_is_counted():
    _, net = armed(Rule({"step": "1"}, "drop"))
    send(net)
    assert [e.step for e in pump(net)] == ["0", "2"]
    assert net.dropped == 1 and net.balanced()


def test_delay_moves_envelope_back():
    _, net = armed(Rule({"step": "0"}, "delay", {"n": 2}))
    send(net)
    assert [e.step for e in pump(net)] == ["1", "2", "0"]
    assert net.balanced()


def test_replay_delivers_a_marked_copy():
    _, net = armed(Rule({"step": "0"}, "replay"))
    send(net, 1)
    got = pump(net)
    assert len(got) == 2 and got[0].body == got[1].body
    assert [e.injected for e in got] == [False, True]
    assert net.balanced()


def test_replay_history_needs_history():
    world, net = armed(Rule({}, "replay_history", limit=0))
    send(net, 2)
    got = pump(net)
    # the first envelope has nothing older to replay; the second re-injects the first
    assert [e.step for e in got] == ["0", "1", "0"]
    assert world.adversary.actions[0] == (2, "replay_history(1)")


@pytest.mark.parametrize("mode", TAMPER_MODES)
def test_tamper_changes_body(mode):
    _, net = armed(Rule({"step": "1"}, "tamper", {"mode": mode}))
    sent = send(net, 2)
    got = pump(net)
    assert got[1].body != sent[1].body
    assert got[0].body == sent[0].body


def test_inject_junk_and_rules_skip_injected():
    _, net = armed(Rule({}, "inject", {"junk": 5, "dst": "c"}, limit=0))
    send(net, 1)
    got = pump(net)
    assert len(got) == 2
    assert got[1].dst == "c" and len(got[1].body) == 5 and got[1].injected


def test_observe_passes_through():
    world, net = armed(Rule({}, "observe", limit=0))
    sent = send(net)
    assert pump(net) == sent
    assert [a for _, a in world.adversary.actions] == ["observe"] * 3


def test_rule_validation_and_roundtrip():
    with pytest.raises(AdversaryError):
        Rule({}, "explode")
    with pytest.raises(AdversaryError):
        Rule({"colour": "red"}, "drop")
    r = Rule({"step": "12", "label": "Ack"}, "delay", {"n": 4}, limit=0)
    assert Rule.from_json(r.to_json()) == r


def test_label_match_is_substring():
    r = Rule({"label": "Transfer"}, "drop")
    _, net = armed(r)
    env = net.send("a", "b", RECORD, "p", "10", "10. Transfer C", b"x")
    assert r.matches(env)
    assert not r.matches(net.send("a", "b", HANDSHAKE, "p", "9", "9. STCP", b"x"))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.sampled_from(["drop", "delay", "replay", "tamper", "inject"]), max_size=4),
       st.integers(1, 40))
def test_every_run_balances(actions, seq):
    rules = [Rule({"seq": seq + i}, a) for i, a in enumerate(actions)]
    world = standard_world(program=AdversaryProgram(tuple(rules)))
    run_migration(world, "tsm", "ta_a", "ta_b")
    assert world.network.balanced()
    assert checks.check_all(world) == []


def test_same_seed_same_transcript():
    sc = load_scenario(bundled("campaign"))
    assert execute(sc, 3).world.transcript_jsonl() == execute(sc, 3).world.transcript_jsonl()
    assert execute(sc, 3).world.transcript_jsonl() != execute(sc, 4).world.transcript_jsonl()


def test_secrecy_check_sees_planted_bytes(world):
    run_migration(world, "tsm", "ta_a", "ta_b")
    assert checks.check_secrecy(world) == []
    cred = next(iter(world.actor("ta_b").holdings()))
    world.network.bodies.append(b"xx" + cred.material + b"yy")
    (v,) = checks.check_secrecy(world)
    assert v.invariant == "secrecy" and "credential/" in v.detail


def test_no_loss_check_notices_deleted_credential(world):
    ta = world.actor("ta_a")
    ta.delete(frozenset([sorted(ta.holdings().ids)[0]]))
    assert [v.invariant for v in checks.check_no_loss(world)] == ["no-loss"]


def test_backup_counts_as_a_live_copy(world):
    run_backup(world, "tsm", "ta_a", "ba")
    world.actor("ta_a").wipe()
    assert checks.check_no_loss(world) == []


def test_planted_compromise_is_detected():
    result = execute(load_scenario(bundled("planted-compromise")))
    assert result.exit_code == 3
    assert {v.invariant for v in result.violations} == {"secrecy"}
    assert result.world.adversary.decrypted


def test_forged_impersonation_is_rejected():
    world, _ = armed(Rule({"step": "9", "dst": "ta_b", "kind": "handshake"}, "impersonate"))
    out = run_migration(world, "tsm", "ta_a", "ta_b")
    assert out.status == "Aborted" and out.aborted_step == "9"
    assert checks.check_all(world) == []


def test_small_campaign_is_clean_and_ordered():
    sc = load_scenario(bundled("migration"))
    one = campaign.run_campaign(sc, "mixed", 12, seed=9)
    two = campaign.run_campaign(sc, "mixed", 12, seed=9, workers=3)
    assert one.violations == 0
    assert one.dumps() == two.dumps()
    assert [r.index for r in one.results] == list(range(12))


def test_campaign_minimizes_planted_flaw():
    sc = load_scenario(bundled("planted-compromise"))
    report = campaign.run_campaign(sc, "mixed", 30, seed=1)
    # most random rule sets abort the run before the hijack can happen
    assert report.findings
    for finding in report.findings:
        assert finding.minimized is not None
        assert [r["action"] for r in finding.minimized] == ["impersonate"]


def test_campaign_rejects_bad_arguments():
    sc = load_scenario(bundled("migration"))
    with pytest.raises(campaign.CampaignError):
        campaign.run_campaign(sc, "mixed", 0, seed=1)
    with pytest.raises(campaign.CampaignError):
        campaign.run_campaign(sc, "chaos", 1, seed=1)


@pytest.mark.parametrize("seed", range(5))
def test_forward_secrecy_oracle(seed):
    trial = oracles.forward_secrecy_trial(seed)
    assert not trial.broken
    assert trial.control_recovered and trial.records_read == 1


def test_backup_not_openable_by_tsm_or_ba(world):
    run_backup(world, "tsm", "ta_a", "ba")
    outsiders = {k: v for k, v in world.secrets.items() if k.startswith(("tsm/", "ba/", "session/"))}
    assert outsiders
    assert oracles.backup_exposed_to(world, outsiders) == []
    # positive control: the TA's own storage root opens it
    assert len(oracles.backup_exposed_to(world, {"ta": world.secrets["ta_a/srk"]})) == 1
