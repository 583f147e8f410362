import json
from pathlib import Path

import numpy as np
import pytest

from maskrefine.errors import ProtocolViolation, RefinerUnavailable
from maskrefine.maps import Image, MaskSet
from maskrefine.metrics import evaluate
from maskrefine.prompts import (
    BoundingBox,
    PromptMode,
    PromptSet,
    SeedPoint,
    build_prompt_sets,
    decode_mask_b64,
    encode_mask_b64,
)
from maskrefine.refine import (
    OracleRefiner,
    Refiner,
    RefinerCapabilities,
    RefineRequest,
    RefineResponse,
    RemoteRefiner,
    decode_image_b64,
    encode_image_b64,
    filter_prompt,
    refine_class,
    refine_mask_set,
    refine_request_json,
)

from httpstub import ScriptedServer
from synthdata import degrade_to_probmap, make_multiclass_case

FIXTURE_DIR = Path(__file__).parent / "fixtures" / "wire"


class InstrumentedRefiner(Refiner):
    """Wraps a refiner and records every request it receives."""

    def __init__(self, inner: Refiner, caps: RefinerCapabilities | None = None):
        self.inner = inner
        self.caps = caps
        self.requests: list[RefineRequest] = []

    def capabilities(self) -> RefinerCapabilities:
        return self.caps or self.inner.capabilities()

    def refine(self, request: RefineRequest) -> RefineResponse:
        self.requests.append(request)
        return self.inner.refine(request)


def _blob_case():
    image = Image(np.full((20, 30), 25, dtype=np.uint8))
    gt_plane = np.zeros((20, 30), dtype=np.uint8)
    gt_plane[5:15, 8:24] = 1
    gt = MaskSet(gt_plane[None])
    return image, gt


class TestOracleRefiner:
    def test_box_covering_blob_returns_gt(self):
        image, gt = _blob_case()
        oracle = OracleRefiner(gt, margin=0)
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14))
        out = oracle.refine(RefineRequest(image, prompt)).mask
        assert np.array_equal(out, gt.plane(0))

    def test_half_box_margin_zero(self):
        image, gt = _blob_case()
        oracle = OracleRefiner(gt, margin=0)
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 15, 14))
        out = oracle.refine(RefineRequest(image, prompt)).mask
        want = np.zeros_like(gt.plane(0))
        want[5:15, 8:16] = 1
        assert np.array_equal(out, want)

    def test_margin_at_diagonal_recovers_everything(self):
        image, gt = _blob_case()
        oracle = OracleRefiner(gt, margin=40)
        prompt = PromptSet(class_id=0, box=BoundingBox(10, 10, 10, 10))
        out = oracle.refine(RefineRequest(image, prompt)).mask
        assert np.array_equal(out, gt.plane(0))

    def test_seed_only_prompt_uses_seed_box(self):
        image, gt = _blob_case()
        oracle = OracleRefiner(gt, margin=2)
        prompt = PromptSet(class_id=0, seeds=[SeedPoint(10, 10, "positive")])
        out = oracle.refine(RefineRequest(image, prompt)).mask
        want = np.zeros_like(gt.plane(0))
        want[8:13, 8:13] = gt.plane(0)[8:13, 8:13]
        assert np.array_equal(out, want)


class TestRefineClassLoop:
    def test_box_only_zero_rounds_single_call(self):
        image, gt = _blob_case()
        refiner = InstrumentedRefiner(OracleRefiner(gt, margin=0))
        mode = PromptMode(use_box=True, use_positive_seed=False, use_negative_seeds=False,
                          self_refine_rounds=0, dense_in_refine=False)
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14))
        out = refine_class(refiner, image, prompt, mode)
        assert len(refiner.requests) == 1
        assert refiner.requests[0].prompt.seeds == []
        assert np.array_equal(out, gt.plane(0))

    def test_self_refine_sends_dense_prompt(self):
        image, gt = _blob_case()
        refiner = InstrumentedRefiner(OracleRefiner(gt, margin=0))
        mode = PromptMode()  # box first, one refine round with seeds + dense
        prompt = PromptSet(
            class_id=0,
            box=BoundingBox(8, 5, 23, 14),
            seeds=[SeedPoint(15, 10, "positive"), SeedPoint(1, 1, "negative")],
        )
        out = refine_class(refiner, image, prompt, mode)
        assert len(refiner.requests) == 2
        first, second = refiner.requests
        assert first.prompt.dense_mask is None
        assert first.prompt.seeds == []
        assert second.prompt.dense_mask is not None
        # the dense prompt is exactly the first round's output
        first_out = OracleRefiner(gt, margin=0).refine(first).mask
        assert np.array_equal(second.prompt.dense_mask, first_out)
        assert len(second.prompt.seeds) == 2
        assert np.array_equal(out, gt.plane(0))

    def test_call_count_matches_rounds(self):
        image, gt = _blob_case()
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14),
                           seeds=[SeedPoint(15, 10, "positive")])
        for rounds in (0, 1, 2, 3):
            refiner = InstrumentedRefiner(OracleRefiner(gt, margin=0))
            mode = PromptMode(self_refine_rounds=rounds, dense_in_refine=rounds >= 1,
                              use_negative_seeds=False)
            refine_class(refiner, image, prompt, mode)
            assert len(refiner.requests) == 1 + rounds

    def test_box_only_capability_drops_seeds(self):
        image, gt = _blob_case()
        caps = RefinerCapabilities(accepts_points=False, accepts_box=True, accepts_dense=False)
        refiner = InstrumentedRefiner(OracleRefiner(gt, margin=0), caps=caps)
        mode = PromptMode(use_box=True, use_positive_seed=True, use_negative_seeds=True,
                          self_refine_rounds=0, dense_in_refine=False)
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14),
                           seeds=[SeedPoint(15, 10, "positive")])
        refine_class(refiner, image, prompt, mode)
        assert len(refiner.requests) == 1
        sent = refiner.requests[0].prompt
        assert sent.box is not None and sent.seeds == [] and sent.dense_mask is None

    def test_capability_filter_never_leaks(self):
        image, gt = _blob_case()
        caps = RefinerCapabilities(accepts_points=True, accepts_box=False, accepts_dense=False)
        refiner = InstrumentedRefiner(OracleRefiner(gt, margin=0), caps=caps)
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14),
                           seeds=[SeedPoint(15, 10, "positive")])
        refine_class(refiner, image, prompt, PromptMode())
        for req in refiner.requests:
            assert req.prompt.box is None
            assert req.prompt.dense_mask is None

    def test_incompatible_prompt_raises(self):
        caps = RefinerCapabilities(accepts_points=False, accepts_box=True, accepts_dense=False)
        prompt = PromptSet(class_id=0, seeds=[SeedPoint(1, 1, "positive")])
        with pytest.raises(ValueError):
            filter_prompt(prompt, caps)


class TestRefineMaskSet:
    def test_empty_prompts_give_empty_mask(self):
        image, gt = _blob_case()
        out = refine_mask_set(OracleRefiner(gt), image, [], PromptMode(), num_classes=3)
        assert out.num_classes == 3
        assert not out.bits.any()

    def test_classes_without_prompts_stay_empty(self):
        image = Image(np.full((20, 20), 25, dtype=np.uint8))
        planes = np.zeros((3, 20, 20), dtype=np.uint8)
        planes[0, 2:8, 2:8] = 1
        planes[2, 12:18, 12:18] = 1
        gt = MaskSet(planes)
        prompts = build_prompt_sets(gt, PromptMode())
        assert {p.class_id for p in prompts} == {0, 2}
        out = refine_mask_set(OracleRefiner(gt, margin=2), image, prompts, PromptMode(), 3)
        assert not out.plane(1).any()
        assert np.array_equal(out.plane(0), gt.plane(0))
        assert np.array_equal(out.plane(2), gt.plane(2))

    def test_empty_result_is_not_an_error(self):
        image = Image(np.full((10, 10), 25, dtype=np.uint8))
        gt = MaskSet.empty(1, 10, 10)
        prompt = PromptSet(class_id=0, box=BoundingBox(2, 2, 7, 7))
        out = refine_mask_set(OracleRefiner(gt), image, [prompt], PromptMode(), 1)
        assert not out.bits.any()

    def test_oracle_improves_degraded_input(self):
        rng = np.random.default_rng(21)
        image, gt = make_multiclass_case(rng)
        probs = degrade_to_probmap(gt, rng)
        from maskrefine.config import recommended_config
        from maskrefine.pipeline import clean_mask

        config = recommended_config()
        cleaned = clean_mask(probs, config)
        prompts = build_prompt_sets(cleaned, config.prompt_mode)
        refined = refine_mask_set(OracleRefiner(gt, margin=8), image, prompts, config.prompt_mode, gt.num_classes)
        base = evaluate([cleaned], [gt]).mean
        improved = evaluate([refined], [gt]).mean
        assert improved >= base

    def test_determinism(self):
        image, gt = _blob_case()
        prompt = PromptSet(class_id=0, box=BoundingBox(8, 5, 23, 14),
                           seeds=[SeedPoint(15, 10, "positive")])
        mode = PromptMode(use_negative_seeds=False)
        a = refine_mask_set(OracleRefiner(gt, margin=3), image, [prompt], mode, 1)
        b = refine_mask_set(OracleRefiner(gt, margin=3), image, [prompt], mode, 1)
        assert np.array_equal(a.bits, b.bits)


class TestWireEncoding:
    def test_image_b64_round_trip(self):
        rng = np.random.default_rng(8)
        image = Image(rng.integers(0, 256, size=(15, 22), dtype=np.uint8))
        assert np.array_equal(decode_image_b64(encode_image_b64(image)).pixels, image.pixels)

    def test_request_json_shape(self):
        image = Image(np.zeros((4, 5), dtype=np.uint8))
        prompt = PromptSet(class_id=0, box=BoundingBox(1, 1, 3, 2),
                           seeds=[SeedPoint(2, 1, "positive"), SeedPoint(0, 0, "negative")])
        doc = refine_request_json(RefineRequest(image, prompt))
        assert set(doc) == {"image", "box", "positive_points", "negative_points", "dense_mask"}
        assert doc["box"] == [1, 1, 3, 2]
        assert doc["positive_points"] == [[2, 1]]
        assert doc["negative_points"] == [[0, 0]]
        assert doc["dense_mask"] is None

    def test_request_rejects_out_of_bounds(self):
        image = Image(np.zeros((4, 5), dtype=np.uint8))
        with pytest.raises(ValueError):
            RefineRequest(image, PromptSet(class_id=0, box=BoundingBox(0, 0, 5, 2)))
        with pytest.raises(ValueError):
            RefineRequest(image, PromptSet(class_id=0, seeds=[SeedPoint(2, 4, "positive")]))


class TestRemoteRefiner:
    def _request(self):
        image = Image(np.full((6, 7), 50, dtype=np.uint8))
        prompt = PromptSet(class_id=0, box=BoundingBox(1, 1, 5, 4))
        return RefineRequest(image, prompt)

    def _mask_doc(self, h=6, w=7):
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[1:5, 1:6] = 1
        return {"mask": encode_mask_b64(mask), "confidence": 0.9}, mask

    def test_round_trip(self):
        doc, mask = self._mask_doc()
        with ScriptedServer() as server:
            server.script = [(200, doc)]
            refiner = RemoteRefiner(server.endpoint, retries=0)
            caps = refiner.capabilities()
            assert caps.accepts_dense
            response = refiner.refine(self._request())
        assert np.array_equal(response.mask, mask)
        assert response.confidence == pytest.approx(0.9)

    def test_retry_after_two_500s(self):
        doc, mask = self._mask_doc()
        with ScriptedServer() as server:
            server.script = [(500, {"error": "boom"}), (500, {"error": "boom"}), (200, doc)]
            refiner = RemoteRefiner(server.endpoint, retries=3, backoff=0.01)
            response = refiner.refine(self._request())
        assert np.array_equal(response.mask, mask)

    def test_unavailable_after_retries(self):
        with ScriptedServer() as server:
            server.script = [(503, {"error": "loading"})] * 4
            refiner = RemoteRefiner(server.endpoint, retries=2, backoff=0.01)
            with pytest.raises(RefinerUnavailable):
                refiner.refine(self._request())

    def test_wrong_size_mask_is_protocol_violation(self):
        wrong = np.zeros((3, 3), dtype=np.uint8)
        with ScriptedServer() as server:
            server.script = [(200, {"mask": encode_mask_b64(wrong), "confidence": None})]
            refiner = RemoteRefiner(server.endpoint, retries=0)
            with pytest.raises(ProtocolViolation):
                refiner.refine(self._request())

    def test_client_error_is_protocol_violation(self):
        with ScriptedServer() as server:
            server.script = [(422, {"error": "out of bounds"})]
            refiner = RemoteRefiner(server.endpoint, retries=0)
            with pytest.raises(ProtocolViolation):
                refiner.refine(self._request())

    def test_non_json_body_is_protocol_violation(self):
        with ScriptedServer() as server:
            server.script = [(200, "this is not json {")]
            refiner = RemoteRefiner(server.endpoint, retries=0)
            with pytest.raises(ProtocolViolation):
                refiner.refine(self._request())

    def test_connection_refused_unavailable(self):
        refiner = RemoteRefiner("http://127.0.0.1:9", timeout=0.2, retries=1, backoff=0.01)
        with pytest.raises(RefinerUnavailable):
            refiner.capabilities()


class TestGoldenWireFixtures:
    @pytest.mark.parametrize("name", ["box_only", "box_points", "box_points_dense"])
    def test_replay_bit_exact(self, name):
        path = FIXTURE_DIR / f"{name}.json"
        fixture = json.loads(path.read_text())
        expected_mask = np.array(fixture["expected_mask"], dtype=np.uint8)

        with ScriptedServer() as server:
            server.script = [(200, fixture["response"])]
            refiner = RemoteRefiner(server.endpoint, retries=0)
            request = _request_from_fixture(fixture["request"])
            response = refiner.refine(request)
            sent = server.requests[0]

        # decoded response mask equals the frozen expected array bit-exactly
        assert np.array_equal(response.mask, expected_mask)
        assert np.array_equal(decode_mask_b64(fixture["response"]["mask"]), expected_mask)
        # the client sent semantically the recorded request
        recorded = fixture["request"]
        assert sent["box"] == recorded["box"]
        assert sent["positive_points"] == recorded["positive_points"]
        assert sent["negative_points"] == recorded["negative_points"]
        assert np.array_equal(
            decode_image_b64(sent["image"]).pixels,
            decode_image_b64(recorded["image"]).pixels,
        )
        if recorded["dense_mask"] is None:
            assert sent["dense_mask"] is None
        else:
            assert np.array_equal(
                decode_mask_b64(sent["dense_mask"]), decode_mask_b64(recorded["dense_mask"])
            )


def _request_from_fixture(doc: dict) -> RefineRequest:
    from maskrefine.prompts import prompt_set_from_json

    prompt_doc = dict(doc)
    image = decode_image_b64(prompt_doc.pop("image"))
    prompt_doc["class_id"] = 0
    return RefineRequest(image, prompt_set_from_json(prompt_doc))
