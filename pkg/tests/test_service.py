import struct
import subprocess
import sys
import zlib

import numpy as np
import pytest

from pgnet import checkpoint
from pgnet.errors import BadCheckpoint, BadFrame, BadMagic, BadVersion, ServerStatus, Truncated
from pgnet.generator import PGN
from pgnet.inversion import Inverter
from pgnet.service import (STATUS_BAD_REQUEST, STATUS_OK, STATUS_SHAPE_ERROR, InferenceServer, LogitFrame,
                           MemoryTransport, PromptFrame, SocketTransport, client_classify, decode_logits,
                           decode_prompt, encode_logits, encode_prompt, load_server_model, start_server,
                           to_u8)
from pgnet.training import Classifier, PromptedModel, predict


def random_prompt_frame(r):
    h, w = int(r.integers(1, 20)), int(r.integers(1, 20))
    if r.random() < 0.5:
        px = r.standard_normal((3, h, w)).astype(np.float32)
    else:
        px = r.integers(0, 256, (3, h, w)).astype(np.uint8)
    return PromptFrame(px, crc=bool(r.random() < 0.5))


class TestCodec:
    def test_prompt_header_layout(self):
        raw = encode_prompt(PromptFrame(np.zeros((3, 2, 4), np.float32)))
        assert raw[:12] == b"PGNF" + bytes([1, 1]) + struct.pack("<HHH", 3, 2, 4)
        assert len(raw) == 12 + 3 * 2 * 4 * 4

    def test_u8_and_crc_flags(self):
        raw = encode_prompt(PromptFrame(np.zeros((3, 1, 1), np.uint8), crc=True))
        assert raw[5] == 0x02 | 0x04 and len(raw) == 15

    def test_logit_layout_with_crc(self):
        raw = encode_logits(LogitFrame(STATUS_OK, np.array([1.0, -2.0], np.float32), crc=True))
        body = b"PGNR" + bytes([1, 0]) + struct.pack("<H2f", 2, 1.0, -2.0)
        assert raw == body + struct.pack("<I", zlib.crc32(body))

    def test_round_trip_1000_frames(self):
        r = np.random.default_rng(2024)
        for _ in range(1000):
            f = random_prompt_frame(r)
            assert decode_prompt(encode_prompt(f)) == f
            n = int(r.integers(0, 30))
            lf = LogitFrame(STATUS_OK, r.standard_normal(n).astype(np.float32), crc=f.crc)
            assert decode_logits(encode_logits(lf), crc=f.crc) == lf

    def test_truncated(self):
        raw = encode_prompt(PromptFrame(np.ones((3, 4, 4), np.float32)))
        with pytest.raises(Truncated):
            decode_prompt(raw[:-1])
        with pytest.raises(Truncated):
            decode_prompt(raw[:5])
        with pytest.raises(Truncated):
            decode_logits(encode_logits(LogitFrame(STATUS_OK, np.ones(3, np.float32)))[:-1])

    def test_bad_version_and_magic(self):
        raw = bytearray(encode_prompt(PromptFrame(np.ones((3, 4, 4), np.float32))))
        raw[4] = 2
        with pytest.raises(BadVersion):
            decode_prompt(bytes(raw))
        with pytest.raises(BadMagic):
            decode_prompt(b"XXXX" + bytes(raw[4:]))

    def test_trailing_and_bad_flags(self):
        raw = encode_prompt(PromptFrame(np.ones((3, 1, 1), np.float32)))
        with pytest.raises(BadFrame):
            decode_prompt(raw + b"\x00")
        with pytest.raises(BadFrame):
            decode_prompt(raw[:5] + bytes([0x03]) + raw[6:])

    def test_crc_mismatch(self):
        raw = bytearray(encode_logits(LogitFrame(STATUS_OK, np.ones(2, np.float32), crc=True)))
        raw[9] ^= 0xFF
        with pytest.raises(BadFrame):
            decode_logits(bytes(raw), crc=True)

    def test_error_frames_carry_no_logits(self):
        with pytest.raises(BadFrame):
            encode_logits(LogitFrame(STATUS_SHAPE_ERROR, np.ones(2, np.float32)))


@pytest.fixture(scope="module")
def server(small_enc):
    return InferenceServer(small_enc, Classifier(10, 48, seed=4))


@pytest.fixture(scope="module")
def socket_server(server):
    srv, endpoint = start_server(server)
    yield endpoint
    srv.shutdown()
    srv.server_close()


def request(server, px, crc=False):
    return decode_logits(server.handle_bytes(encode_prompt(PromptFrame(px, crc=crc))), crc=crc)


class TestServer:
    def test_valid_frame(self, server, rng):
        out = request(server, rng.random((3, 16, 16)).astype(np.float32))
        assert out.status == STATUS_OK and out.logits.shape == (10,)

    def test_extended_frame(self, server, rng):
        assert request(server, rng.random((3, 24, 16)).astype(np.float32)).status == STATUS_OK

    @pytest.mark.parametrize("shape", [(3, 18, 16), (3, 16, 12), (3, 28, 16), (3, 12, 16)])
    def test_shape_error(self, server, shape):
        out = request(server, np.zeros(shape, np.float32))
        assert out.status == STATUS_SHAPE_ERROR and out.logits.size == 0

    def test_wrong_magic(self, server):
        raw = b"JUNK" + encode_prompt(PromptFrame(np.zeros((3, 16, 16), np.float32)))[4:12]
        assert decode_logits(server.handle_bytes(raw)).status == STATUS_BAD_REQUEST

    def test_non_finite_pixels(self, server):
        px = np.zeros((3, 16, 16), np.float32)
        px[0, 0, 0] = np.nan
        assert request(server, px).status == STATUS_BAD_REQUEST

    def test_identical_requests_identical_bytes(self, server, rng):
        raw = encode_prompt(PromptFrame(rng.random((3, 16, 16)).astype(np.float32), crc=True))
        assert server.handle_bytes(raw) == server.handle_bytes(raw)

    def test_u8_request(self, server, rng):
        img = rng.random((3, 16, 16)).astype(np.float32)
        a = request(server, to_u8(img)).logits
        b = request(server, to_u8(img).astype(np.float32) / np.float32(255)).logits
        np.testing.assert_array_equal(a, b)

    def test_pipelined_frames(self, server, rng):
        good = encode_prompt(PromptFrame(rng.random((3, 16, 16)).astype(np.float32)))
        out = server.handle_bytes(good + b"JUNK" + good[4:12] + good)
        assert len(out) == 2 * (8 + 40) + 8


class TestTransports:
    def test_k0_matches_local_model_exactly(self, server, small_enc, rng):
        img = rng.random((3, 16, 16)).astype(np.float32)
        got = client_classify(img, None, None, MemoryTransport(server))
        local = predict(PromptedModel(small_enc, None, server.classifier), img[None])[0]
        np.testing.assert_array_equal(got, local)

    def test_socket_equals_memory(self, server, socket_server, rng):
        img = rng.random((3, 16, 16)).astype(np.float32)
        a = client_classify(img, None, None, MemoryTransport(server), crc=True)
        b = client_classify(img, None, None, socket_server, crc=True)
        np.testing.assert_array_equal(a, b)

    def test_bad_frame_keeps_connection_open(self, socket_server, rng):
        good = encode_prompt(PromptFrame(rng.random((3, 16, 16)).astype(np.float32)))
        with SocketTransport(socket_server) as t:
            assert t.request(b"JUNK" + good[4:12]).status == STATUS_BAD_REQUEST
            assert t.request(good).status == STATUS_OK

    def test_prompted_client_matches_local(self, server, small_enc, rng):
        pgn = PGN.create(4, 8, 48, input_resolution=16, seed=2)
        pgn.gen.head.out.weight.data = (rng.standard_normal(pgn.gen.head.out.weight.shape) * 0.3).astype(np.float32)
        img = rng.random((3, 16, 16)).astype(np.float32)
        inv = Inverter.from_encoder(small_enc)
        got = client_classify(img, pgn, inv, MemoryTransport(server))
        local = predict(PromptedModel(small_enc, pgn, server.classifier), img[None])[0]
        assert np.max(np.abs(got - local)) < 1e-3

    def test_u8_mode_runs_and_is_lossy(self, server, small_enc, rng):
        pgn = PGN.create(4, 8, 48, input_resolution=16, seed=2)
        pgn.gen.head.out.weight.data = (rng.standard_normal(pgn.gen.head.out.weight.shape) * 0.3).astype(np.float32)
        img = rng.random((3, 16, 16)).astype(np.float32)
        inv = Inverter.from_encoder(small_enc)
        a = client_classify(img, pgn, inv, MemoryTransport(server), mode="f32")
        b = client_classify(img, pgn, inv, MemoryTransport(server), mode="u8")
        assert a.shape == b.shape and np.all(np.isfinite(b))

    def test_status_raised(self, server):
        with pytest.raises(ServerStatus):
            client_classify(np.zeros((3, 14, 16), np.float32), None, None, MemoryTransport(server))


class TestServerCheckpoint:
    def test_loads_encoder_and_classifier(self, small_enc, small_cfg, tmp_path):
        model = PromptedModel(small_enc, None, Classifier(10, 48, seed=6))
        model.save(tmp_path / "s.ckpt")
        enc, cls = load_server_model(tmp_path / "s.ckpt", small_cfg, 10)
        np.testing.assert_array_equal(cls.weight.data, model.classifier.weight.data)
        assert enc.w_proj.frozen

    def test_rejects_prompt_tensors(self, small_enc, small_cfg, tmp_path):
        model = PromptedModel(small_enc, PGN.create(4, 8, 48), Classifier(10, 48))
        model.save(tmp_path / "full.ckpt")
        with pytest.raises(BadCheckpoint):
            load_server_model(tmp_path / "full.ckpt", small_cfg, 10)
        model.save(tmp_path / "server.ckpt", include_source=False)
        load_server_model(tmp_path / "server.ckpt", small_cfg, 10)

    def test_missing_classifier(self, small_enc, small_cfg, tmp_path):
        checkpoint.save(tmp_path / "enc.ckpt", small_enc.state_dict("enc."))
        with pytest.raises(BadCheckpoint):
            load_server_model(tmp_path / "enc.ckpt", small_cfg, 10)


def test_service_does_not_import_generator():
    code = "import sys, pgnet.service; print('pgnet.generator' in sys.modules)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "False"
