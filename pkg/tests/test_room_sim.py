import logging

import numpy as np
import pytest
from pydantic import ValidationError

from rtfgraph.errors import GeometryError
from rtfgraph.room_sim import (RoomSpec, SceneSpec, build_scene, compute_airs, image_source_air, lattice_t60,
                               position_airs, render_airs, render_position, sabine_reflectivity)
from rtfgraph.signal_core import Signal
from tests.toy import toy_room, toy_scene_spec


def schroeder_t60(taps: np.ndarray, fs: int) -> float:
    energy = np.cumsum((taps ** 2)[::-1])[::-1]
    edc = 10 * np.log10(energy / energy[0] + 1e-300)
    t = np.arange(taps.size) / fs
    fit = (edc <= -5.0) & (edc >= -25.0)
    slope = np.polyfit(t[fit], edc[fit], 1)[0]
    return -60.0 / slope


def test_room_spec_validation():
    with pytest.raises(ValidationError):
        RoomSpec(dimensions=(3.0, -1.0, 2.0))
    with pytest.raises(ValidationError):
        RoomSpec(t60=-0.1)
    with pytest.raises(ValidationError):
        RoomSpec(unknown=1)


def test_scene_grid_is_x_fastest(toy_scene):
    assert toy_scene.num_positions == 12
    np.testing.assert_allclose(toy_scene.positions[1] - toy_scene.positions[0], [0.1, 0.0, 0.0])
    np.testing.assert_allclose(toy_scene.positions[3] - toy_scene.positions[0], [0.0, 0.1, 0.0])
    np.testing.assert_allclose(toy_scene.positions[6] - toy_scene.positions[0], [0.0, 0.0, 0.1])
    for index in range(toy_scene.num_positions):
        assert toy_scene.index_of(*toy_scene.vertex_of(index)) == index
    with pytest.raises(IndexError):
        toy_scene.source(12)


def test_scene_outside_room_lists_offenders():
    spec = toy_scene_spec().model_copy(update={"grid_origin": (2.9, 1.8, 1.1)})
    with pytest.raises(GeometryError) as info:
        build_scene(spec, toy_room())
    assert "grid[" in str(info.value)


def test_scene_warns_about_close_noise_source(caplog):
    spec = toy_scene_spec().model_copy(update={"oog_positions": [(1.2, 2.2, 1.1)]})
    with caplog.at_level(logging.WARNING, logger="rtfgraph.room_sim"):
        build_scene(spec, toy_room())
    assert any("< 1 m" in record.message for record in caplog.records)


def test_scene_spec_requires_two_mics():
    with pytest.raises(ValidationError):
        SceneSpec(mic_positions=[(1.0, 1.0, 1.0)], ref_index=0)


def test_free_field_direct_path():
    room = RoomSpec(dimensions=(6.0, 6.0, 3.0), t60=0.0)
    delay = 50
    distance = delay * room.speed_of_sound / room.sample_rate
    mic = np.array([2.0, 3.0, 1.5])
    air = image_source_air(room, mic + [distance, 0.0, 0.0], mic, air_len=256)
    assert int(np.argmax(np.abs(air.taps))) == delay
    assert air.taps[delay] == pytest.approx(0.9 / (4 * np.pi * distance), rel=1e-12)
    assert np.all(air.taps[:delay - 16] == 0.0)


@pytest.mark.parametrize("t60", [0.0, 0.3])
def test_air_is_reciprocal(t60):
    room = toy_room(t60)
    src, mic = (0.7, 2.1, 1.6), (2.2, 0.9, 1.1)
    forward = image_source_air(room, src, mic, air_len=2048).taps
    backward = image_source_air(room, mic, src, air_len=2048).taps
    np.testing.assert_allclose(forward, backward, atol=1e-12, rtol=0)


def test_free_field_delay_within_half_sample():
    room = RoomSpec(dimensions=(12.0, 12.0, 6.0), t60=0.0)
    mic = np.array([2.0, 2.0, 1.0])
    direction = np.array([1.0, 1.0, 0.5]) / 1.5
    for distance in np.linspace(0.5, 5.0, 10):
        air = image_source_air(room, mic + distance * direction, mic, air_len=512)
        expected = distance / room.speed_of_sound * room.sample_rate
        assert abs(int(np.argmax(np.abs(air.taps))) - expected) <= 0.5


def test_air_rejects_bad_geometry():
    room = toy_room()
    with pytest.raises(GeometryError):
        image_source_air(room, (4.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(GeometryError):
        image_source_air(room, (1.0, 1.0, 1.0), (1.0, 1.0, 1.0))


def test_reflectivity_monotone_and_bounded():
    values = [sabine_reflectivity(RoomSpec(t60=t60)) for t60 in (0.1, 0.2, 0.3, 0.6, 0.9)]
    assert all(0.0 < v < 1.0 for v in values)
    assert np.all(np.diff(values) > 0)


def test_reflectivity_realizes_lattice_t60():
    room = RoomSpec(t60=0.3)
    assert lattice_t60(room, sabine_reflectivity(room)) == pytest.approx(0.3, rel=1e-6)


def test_reflectivity_rejects_zero_t60():
    with pytest.raises(GeometryError):
        sabine_reflectivity(RoomSpec(t60=0.0))


def test_simulated_decay_matches_requested_t60():
    room = RoomSpec(t60=0.3)
    air = image_source_air(room, (3.0, 3.2, 1.2), (3.0, 1.0, 1.2), air_len=8000)
    assert schroeder_t60(air.taps, room.sample_rate) == pytest.approx(0.3, rel=0.25)


@pytest.mark.slow
def test_simulated_decay_long_reverb():
    room = RoomSpec(t60=0.6)
    air = image_source_air(room, (3.0, 3.2, 1.2), (3.0, 1.0, 1.2), air_len=16000)
    assert schroeder_t60(air.taps, room.sample_rate) == pytest.approx(0.6, rel=0.25)


def test_compute_airs_independent_of_threads(toy_scene):
    serial = compute_airs(toy_scene, air_len=256, threads=1, progress=False)
    threaded = compute_airs(toy_scene, air_len=256, threads=3, progress=False)
    assert serial.shape == (12, 3, 256)
    np.testing.assert_array_equal(serial, threaded)
    np.testing.assert_array_equal(serial[4], position_airs(toy_scene, 4, air_len=256))
    oog = compute_airs(toy_scene, air_len=256, oog=True, progress=False)
    assert oog.shape == (2, 3, 256)


def test_render_airs_is_linear_convolution(rng, toy_scene):
    airs = position_airs(toy_scene, 0, air_len=128)
    excitation = Signal(rng.standard_normal(500))
    image = render_airs(airs, excitation, ref_index=1)
    assert image.data.shape == (3, 627)
    assert image.ref_index == 1
    np.testing.assert_allclose(image.data[2], np.convolve(excitation.samples, airs[2]), atol=1e-12)


def test_render_position_uses_scene_airs(rng, toy_scene):
    excitation = Signal(rng.standard_normal(300))
    recording = render_position(toy_scene, 1, excitation, air_len=128, oog=True)
    expected = render_airs(position_airs(toy_scene, 1, air_len=128, oog=True), excitation, toy_scene.ref_index)
    assert recording.ref_index == toy_scene.ref_index
    np.testing.assert_array_equal(recording.data, expected.data)
