import pytest

from pilotkit.core import Fabric, LatencyModel, PilotDescription, TaskDescription


@pytest.fixture
def sim_pilot():
    def make(uid="p0", nodes=2, cores=4, gpus=0, dvm_max=256, lm=None, **kw):
        return PilotDescription(
            uid=uid, fabric=Fabric.SIMULATED, nodes=nodes, cores_per_node=cores,
            gpus_per_node=gpus, dvm_max_nodes=dvm_max,
            latency_model=lm or LatencyModel(), **kw)
    return make


@pytest.fixture
def local_pilot():
    def make(uid="pl", cores=4, **kw):
        return PilotDescription(
            uid=uid, fabric=Fabric.LOCAL, nodes=1, cores_per_node=cores,
            oversubscribe=True, **kw)
    return make


def task(uid, cores=1, gpus=0, mpi=False, duration=0.0, tag=None, **kw):
    return TaskDescription(
        uid=uid, executable="pilotkit-emulate",
        arguments=("--duration", str(duration)),
        cores_per_task=cores, gpus_per_task=gpus, uses_mpi=mpi, tag=tag, **kw)
