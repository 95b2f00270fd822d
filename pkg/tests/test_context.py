import random

import pytest

from fichad.backend import MockBackend
from fichad.context import (ContextGenerator, CompositionError,
                            GeneratedContext, PromptTemplateSet, ScoredImage,
                            TemplateError, compose_variant, conceptual_hint,
                            corpus_stats, entity_summary, filter_images,
                            instantiate, lamm_context, read_context_store,
                            relation_template, sample_relation_triples,
                            write_context_store, V1, V2, V1X, V1Y)
from fichad.kg import KnowledgeGraph, Triple
from conftest import ScriptedBackend, make_vocab


class TestTemplates:
    def test_instantiate_fills_slots(self):
        assert instantiate("hi {name}", name="x") == "hi x"

    def test_missing_slot_is_error(self):
        with pytest.raises(TemplateError, match="name"):
            instantiate("hi {name}")

    def test_load_dir_overrides_defaults(self, tmp_path):
        (tmp_path / "relevance.txt").write_text("custom {head} {tail}\n")
        ts = PromptTemplateSet.load_dir(tmp_path)
        assert ts["relevance"] == "custom {head} {tail}"
        assert "{entity}" in ts["entity_summary"]  # default kept

    def test_save_then_load_round_trip(self, tmp_path):
        ts = PromptTemplateSet()
        ts.save_dir(tmp_path / "prompts")
        again = PromptTemplateSet.load_dir(tmp_path / "prompts")
        assert again.templates == ts.templates


class TestFilterImages:
    def test_threshold_and_example_scores(self):
        bk = ScriptedBackend(scores={"i1": 0.9, "i2": 0.86, "i3": 0.2})
        fh, ft, skipped = filter_images("H", "T", ["i1", "i2", "i3"], [],
                                        0.85, bk)
        assert [s.ref for s in fh] == ["i1", "i2"]
        assert ft == [] and skipped == 0

    def test_cap_at_five(self):
        refs = [f"i{j}" for j in range(7)]
        bk = ScriptedBackend(scores={r: 0.9 for r in refs})
        fh, _, _ = filter_images("H", "T", refs, [], 0.85, bk)
        assert len(fh) == 5
        # ties broken by manifest order
        assert [s.ref for s in fh] == refs[:5]

    def test_all_below_threshold_gives_empty(self):
        bk = ScriptedBackend(scores={"i1": 0.1, "i2": 0.5})
        fh, _, _ = filter_images("H", "T", ["i1", "i2"], [], 0.85, bk)
        assert fh == []

    def test_threshold_monotonicity_over_random_vectors(self):
        """Raising tau never enlarges any filtered set (1000 random vectors)."""
        rng = random.Random(11)
        for _ in range(1000):
            n = rng.randint(0, 10)
            scores = {f"i{j}": rng.random() for j in range(n)}
            bk = ScriptedBackend(scores=scores)
            refs = list(scores)
            tau_lo, tau_hi = sorted((rng.random(), rng.random()))
            lo, _, _ = filter_images("H", "T", refs, [], tau_lo, bk)
            hi, _, _ = filter_images("H", "T", refs, [], tau_hi, bk)
            assert {s.ref for s in hi} <= {s.ref for s in lo}
            assert all(s.score >= tau_hi for s in hi)
            assert len(hi) <= 5 and {s.ref for s in hi} <= set(refs)

    def test_invalid_tau_rejected(self):
        with pytest.raises(ValueError):
            filter_images("H", "T", [], [], 1.5, ScriptedBackend())


class TestLammContext:
    def test_both_sides_present_names_both(self):
        bk = MockBackend(0)
        text, used, fallback = lamm_context(
            "View of Arles", "Vincent van Gogh",
            [ScoredImage("a.jpg", 0.9)], [ScoredImage("b.jpg", 0.88)], bk)
        assert not fallback
        assert "View of Arles" in text and "Vincent van Gogh" in text
        assert len(used) == 2

    def test_empty_side_falls_back_with_names(self):
        bk = MockBackend(0)
        text, used, fallback = lamm_context("A", "B", [], [ScoredImage("x", 0.9)],
                                            bk)
        assert fallback and used == []
        assert "A" in text and "B" in text

    def test_mock_determinism(self):
        args = ("H", "T", [ScoredImage("a", 0.9)], [ScoredImage("b", 0.9)])
        t1, _, _ = lamm_context(*args, MockBackend(7))
        t2, _, _ = lamm_context(*args, MockBackend(7))
        assert t1 == t2


class TestEntitySummary:
    def test_with_images(self):
        text, fallback = entity_summary("Arles", ["i1", "i2"], MockBackend(0))
        assert not fallback and "Arles" in text

    def test_without_images_falls_back(self):
        text, fallback = entity_summary("Arles", [], MockBackend(0))
        assert fallback and "Arles" in text


def hint_graph():
    ents = make_vocab([f"e{i}" for i in range(10)])
    rels = make_vocab(["depict", "rare", "empty"])
    train = [Triple(i, 0, (i + 1) % 10) for i in range(10)]
    train += [Triple(i, 1, (i + 2) % 10) for i in range(7)]
    return KnowledgeGraph(ents, rels, {"train": train, "valid": [], "test": []})


class TestConceptualHint:
    def test_min_rule_uses_all_available(self):
        g = hint_graph()
        sampled = sample_relation_triples(g, 1, n=20, seed=0)
        assert len(sampled) == 7

    def test_sampling_deterministic(self):
        g = hint_graph()
        a = sample_relation_triples(g, 0, n=5, seed=3)
        b = sample_relation_triples(g, 0, n=5, seed=3)
        assert a == b
        assert len(a) == 5

    def test_hint_text_deterministic_and_flagging(self):
        g = hint_graph()
        t1, f1 = conceptual_hint(g, 0, 0, "a summary", MockBackend(1), seed=4)
        t2, f2 = conceptual_hint(g, 0, 0, "a summary", MockBackend(1), seed=4)
        assert t1 == t2 and not f1
        _, flagged = conceptual_hint(g, 0, 2, "s", MockBackend(1))
        assert flagged


class TestRelationTemplate:
    def test_invalid_output_falls_back_to_literal(self):
        g = hint_graph()
        bk = ScriptedBackend(texts=["no placeholders", "still none"])
        assert relation_template(g, 0, bk) == "[A] depict [B]"

    def test_valid_output_accepted(self):
        g = hint_graph()
        bk = ScriptedBackend(texts=["Painting [A] depict object [B]."])
        assert relation_template(g, 0, bk) == "Painting [A] depict object [B]."

    def test_double_slot_rejected(self):
        g = hint_graph()
        bk = ScriptedBackend(texts=["[A] [A] and [B]", "[A] [B] [B]"])
        assert relation_template(g, 0, bk) == "[A] depict [B]"


class TestComposeVariant:
    def test_v1_is_identity(self):
        assert compose_variant(V1, lamm="text") == ("text", False)

    def test_v2_is_identity(self):
        assert compose_variant(V2, entity_summary_text="s") == ("s", False)

    def test_v1x_appends_first_sentence(self):
        text, degraded = compose_variant(
            V1X, lamm="The painting shows orchards.",
            db_description="Arles is a city. It lies on the Rhone.")
        assert text == "The painting shows orchards. Arles is a city."
        assert not degraded

    def test_v1x_degrades_without_description(self):
        text, degraded = compose_variant(V1X, lamm="base")
        assert text == "base" and degraded

    def test_v1x_strict_mode_errors(self):
        with pytest.raises(CompositionError):
            compose_variant(V1X, lamm="base", degrade=False)

    def test_v1y_appends_hint(self):
        text, _ = compose_variant(V1Y, lamm="base.", hint="Likely a place.")
        assert text == "base. Likely a place."

    def test_missing_parts_error(self):
        with pytest.raises(CompositionError):
            compose_variant(V1, lamm=None)


class TestPipeline:
    def test_generator_byte_reproducible(self, arles):
        def run():
            gen = ContextGenerator(arles.graph, arles.assets, MockBackend(7),
                                   seed=7)
            ctxs = gen.generate_for_splits(V1, splits=("train", "test"))
            return "\n".join(c.to_json_line() for c in ctxs)
        assert run() == run()

    def test_store_round_trip(self, arles, tmp_path):
        gen = ContextGenerator(arles.graph, arles.assets, MockBackend(7))
        ctxs = gen.generate_for_splits(V2)
        p = tmp_path / "ctx.jsonl"
        write_context_store(p, ctxs)
        again = read_context_store(p)
        assert [c.to_json_line() for c in again] == \
               [c.to_json_line() for c in ctxs]

    def test_fichad1_invariant_images_or_fallback(self, arles):
        gen = ContextGenerator(arles.graph, arles.assets, MockBackend(3),
                               tau=0.5)
        for ctx in gen.generate_for_splits(V1, splits=("train",)):
            if ctx.fallback:
                assert ctx.images == []
            else:
                assert ctx.images and all(s.score >= 0.5 for s in ctx.images)


class TestCorpusStats:
    def subject(self, g, h, r, t):
        return {"kind": "triple", "head": g.entities.label_of(h),
                "relation": g.relations.label_of(r),
                "tail": g.entities.label_of(t)}

    def test_both_entity_coverage_two_of_three(self, arles):
        g, assets = arles.graph, arles.assets
        ent = g.entities
        voa, vg, ar = ent.id_of("view_of_arles"), ent.id_of("van_gogh"), \
            ent.id_of("arles")
        ctxs = [
            GeneratedContext(V1, self.subject(g, voa, 0, vg),
                             "View of Arles was painted by Vincent van Gogh.",
                             images=[ScoredImage("x", 0.9)]),
            GeneratedContext(V1, self.subject(g, voa, 1, ar),
                             "View of Arles shows the city of Arles.",
                             images=[ScoredImage("x", 0.9)]),
            GeneratedContext(V1, self.subject(g, voa, 0, vg),
                             "A painting and its painter.",
                             images=[ScoredImage("x", 0.9)]),
        ]
        stats = corpus_stats(ctxs, g, assets)
        assert stats.both_entity_coverage == pytest.approx(2 / 3)
        assert stats.single_entity_coverage == pytest.approx(2 / 3)
        assert stats.triples_with_fichad1 == 3
        assert stats.with_fichad1 == 3  # voa, vg, arles

    def test_fallbacks_excluded_from_counts(self, arles):
        g = arles.graph
        ctxs = [GeneratedContext(V1, self.subject(g, 0, 0, 1), "text",
                                 fallback=True)]
        stats = corpus_stats(ctxs, g, arles.assets)
        assert stats.with_fichad1 == 0 and stats.triples_with_fichad1 == 0

    def test_chain_invariant_on_mock_run(self, arles):
        gen = ContextGenerator(arles.graph, arles.assets, MockBackend(7),
                               tau=0.3)
        ctxs = gen.generate_for_splits(V1, splits=("train", "valid", "test"))
        ctxs += gen.generate_for_splits(V2)
        stats = corpus_stats(ctxs, arles.graph, arles.assets)
        assert stats.with_fichad1 <= stats.with_images <= stats.n_entities

    def test_fichad2_full_coverage_when_texts_name_entities(self, arles):
        gen = ContextGenerator(arles.graph, arles.assets, MockBackend(7))
        ctxs = [c for c in gen.generate_for_splits(V2) if not c.fallback]
        stats = corpus_stats(ctxs, arles.graph, arles.assets)
        assert stats.fichad2_entity_coverage == pytest.approx(1.0)
