import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybrid4d.overlap import LayerCompute, OverlapFlags, Timeline, batch_time, build_schedule, fits_windows
from hybrid4d.perfmodel import CommEstimate

ALL = OverlapFlags.all_subsets()


def hand_case():
    compute = [LayerCompute(10.0, 0.0, 0.0)] * 2
    comm = [CommEstimate(t_ag_z=4.0)] * 2
    return compute, comm


def test_hand_case_baseline_and_prefetch():
    compute, comm = hand_case()
    assert build_schedule(2, compute, comm).batch_time() == 28.0
    assert build_schedule(2, compute, comm, OverlapFlags(oag=True)).batch_time() == 24.0


def test_hand_case_other_flags_do_not_help():
    compute, comm = hand_case()
    for flags in (OverlapFlags(oar=True), OverlapFlags(ors=True), OverlapFlags(oar=True, ors=True)):
        assert build_schedule(2, compute, comm, flags).batch_time() == 28.0


def test_empty_and_single_event():
    assert batch_time(Timeline()) == 0
    assert build_schedule(0, [], []).batch_time() == 0
    t = build_schedule(1, [LayerCompute(5.0, 0.0, 0.0)], [CommEstimate()])
    assert t.batch_time() == 5.0


def test_zero_comm_equals_compute_for_every_flag_set():
    compute = [LayerCompute(1.0, 2.0, 3.0), LayerCompute(0.5, 0.25, 4.0), LayerCompute(1.5, 1.0, 1.0)]
    comm = [CommEstimate()] * 3
    times = {build_schedule(3, compute, comm, f).batch_time() for f in ALL}
    assert times == {sum(c.total for c in compute)}


def test_flag_parsing():
    assert OverlapFlags.parse("oar, OAG") == OverlapFlags(oar=True, oag=True)
    assert OverlapFlags.parse("all") == OverlapFlags(True, True, True)
    assert OverlapFlags.parse("") == OverlapFlags.parse("baseline") == OverlapFlags()
    with pytest.raises(ValueError, match="unknown"):
        OverlapFlags.parse("oar,fast")
    assert len(ALL) == 8 and len(set(ALL)) == 8
    assert OverlapFlags(oar=True) <= OverlapFlags(oar=True, ors=True)
    assert not OverlapFlags(oag=True) <= OverlapFlags(oar=True)


def test_schedule_rejects_bad_input():
    with pytest.raises(ValueError, match="one compute"):
        build_schedule(2, [LayerCompute(1, 1, 1)], [CommEstimate()])
    with pytest.raises(ValueError, match="non-negative"):
        build_schedule(1, [LayerCompute(-1, 1, 1)], [CommEstimate()])


def test_exports():
    compute = [LayerCompute(1.0, 1.0, 1.0)] * 2
    comm = [CommEstimate(0.5, 0.5, 0.5, 0.5, 0.5)] * 2
    t = build_schedule(2, compute, comm, OverlapFlags(True, True, True))
    d = json.loads(t.to_json())
    assert d["batch_time"] == t.batch_time()
    trace = t.chrome_trace()["traceEvents"]
    assert len(trace) == len(t.events)
    assert {e["tid"] for e in trace} == {"compute", "x", "y", "z", "data"}


times = st.floats(0.0, 10.0, allow_nan=False)
layer_compute = st.builds(LayerCompute, times, times, times)
layer_comm = st.builds(CommEstimate, times, times, times, times, times)


@st.composite
def instances(draw):
    L = draw(st.integers(1, 5))
    return draw(st.lists(layer_compute, min_size=L, max_size=L)), draw(st.lists(layer_comm, min_size=L, max_size=L))


@settings(max_examples=200, deadline=None)
@given(instances())
def test_more_flags_never_slower_and_bounds_hold(inst):
    compute, comm = inst
    L = len(compute)
    t = {f: build_schedule(L, compute, comm, f) for f in ALL}
    for tl in t.values():
        tl.check()
    total_compute = sum(c.total for c in compute)
    total_comm = sum(c.t_comm for c in comm)
    for s in ALL:
        assert total_compute - 1e-9 <= t[s].batch_time() <= total_compute + total_comm + 1e-9
        for s2 in ALL:
            if s <= s2:
                assert t[s2].batch_time() <= t[s].batch_time() + 1e-9
    assert t[OverlapFlags()].batch_time() == pytest.approx(total_compute + total_comm, rel=1e-12, abs=1e-12)


def test_transposed_layers_use_the_other_axis():
    compute = [LayerCompute(1.0, 1.0, 1.0)] * 2
    comm = [CommEstimate(t_ar_y=1.0, t_ar_x=2.0)] * 2
    t = build_schedule(2, compute, comm)
    axes = {e.name: e.resource for e in t.events if e.kind == "comm"}
    assert axes["all_reduce_y[0]"] == "y" and axes["all_reduce_x[1]"] == "x"
    assert axes["all_reduce_x[0]"] == "x" and axes["all_reduce_y[1]"] == "y"


def test_fits_windows_hides_all_comm():
    rng = np.random.default_rng(3)
    for _ in range(200):
        L = int(rng.integers(1, 6))
        compute = [LayerCompute(*rng.uniform(0.5, 2.0, 3)) for _ in range(L)]
        comm = []
        for l in range(L):
            ag = 0.0 if l == 0 else rng.uniform(0, compute[l - 1].fwd)
            rs = 0.0 if l == 0 else rng.uniform(0, compute[l - 1].bwd_input + compute[l - 1].bwd_weight)
            comm.append(CommEstimate(t_ag_z=ag, t_rs_z=rs, t_ar_x=rng.uniform(0, compute[l].bwd_weight)))
        assert fits_windows(compute, comm)
        full = build_schedule(L, compute, comm, OverlapFlags(True, True, True)).batch_time()
        assert full == pytest.approx(sum(c.total for c in compute), rel=1e-12)


def test_fits_windows_rejects_exposed_collectives():
    compute = [LayerCompute(1.0, 1.0, 1.0)] * 2
    assert not fits_windows(compute, [CommEstimate(t_ag_z=0.1), CommEstimate()])
    assert not fits_windows(compute, [CommEstimate(), CommEstimate(t_ar_y=0.1)])
    assert not fits_windows(compute, [CommEstimate(), CommEstimate(t_ag_z=1.5)])
    assert fits_windows([], [])
