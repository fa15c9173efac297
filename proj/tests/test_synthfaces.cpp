#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "oracles.hpp"
#include "refkv/synthfaces.hpp"

using namespace refkv;

TEST_CASE("renders are bitwise deterministic") {
    IdentitySpec spec = make_identity_spec(7);
    Rng nr(3);
    NuisanceDraw nd = draw_nuisance(spec, nr);
    Rng r1(11), r2(11);
    Tensor a = render(spec, nd, r1);
    Tensor b = render(spec, nd, r2);
    CHECK(a.shape() == std::vector<int64_t>{3, 32, 32});
    CHECK(a.checksum() == b.checksum());
    for (int64_t i = 0; i < a.numel(); ++i) {
        CHECK(a.data()[i] >= 0.0f);
        CHECK(a.data()[i] <= 1.0f);
    }
}

TEST_CASE("zero nuisance ranges collapse all renders of an identity") {
    IdentitySpec spec = make_identity_spec(3);
    spec.rot_range_deg = 0;
    spec.gain_lo = spec.gain_hi = 1.0;
    spec.bg_lo = spec.bg_hi = 0.3;
    spec.jitter_px = 0;
    spec.speckle = 0;
    Rng rng(5);
    NuisanceDraw n1 = draw_nuisance(spec, rng);
    NuisanceDraw n2 = draw_nuisance(spec, rng);
    Rng ra(1), rb(2);
    CHECK(render(spec, n1, ra).checksum() == render(spec, n2, rb).checksum());
}

TEST_CASE("distinct identity seeds differ by at least one grid quantum") {
    CHECK(identity_grid_capacity() >= 50);
    uint64_t cap = uint64_t(identity_grid_capacity());
    for (uint64_t a = 0; a < cap; ++a)
        for (uint64_t b = a + 1; b < cap; ++b) {
            IdentitySpec sa = make_identity_spec(a);
            IdentitySpec sb = make_identity_spec(b);
            double diff = 0.0;
            for (int p = 0; p < 3; ++p)
                for (int c = 0; c < 3; ++c)
                    diff = std::max(diff, std::fabs(sa.palette[size_t(p)][size_t(c)] -
                                                    sb.palette[size_t(p)][size_t(c)]));
            diff = std::max(diff, std::fabs(sa.face_rx - sb.face_rx));
            diff = std::max(diff, std::fabs(sa.eye_dx - sb.eye_dx));
            diff = std::max(diff, std::fabs(sa.mouth_w - sb.mouth_w));
            CHECK(diff > 0.04);
        }
}

TEST_CASE("toy embedder separates the synthetic identities") {
    FaceEmbedder embedder = make_face_embedder();
    Rng rng(13);
    Corpus corpus = generate_corpus(50, 10, rng, embedder);
    CHECK(corpus.ids.size() == 500);
    SeparabilityReport rep = measure_separability(corpus);
    MESSAGE("separability: mean intra ", rep.mean_intra, ", mean inter ", rep.mean_inter,
            ", max intra ", rep.max_intra, ", min inter ", rep.min_inter, ", margin ",
            rep.margin());
    CHECK(rep.mean_intra < rep.mean_inter);
    CHECK(rep.margin() > 0.0);
}

TEST_CASE("identity graph on emitted embeddings recovers the true partition") {
    FaceEmbedder embedder = make_face_embedder();
    Rng rng(17);
    Corpus corpus = generate_corpus(30, 8, rng, embedder);
    SeparabilityReport rep = measure_separability(corpus);
    REQUIRE(rep.margin() > 0.0);
    IdentityGraph g = build_identity_graph(corpus.embeddings, rep.calibrated_threshold());
    // components must equal the ground-truth identity partition exactly
    std::map<int64_t, std::set<int>> comp_identities;
    std::map<int, std::set<int64_t>> identity_comps;
    for (size_t v = 0; v < corpus.ids.size(); ++v) {
        comp_identities[g.component[v]].insert(corpus.identity[v]);
        identity_comps[corpus.identity[v]].insert(g.component[v]);
    }
    for (const auto& [comp, idents] : comp_identities) CHECK(idents.size() == 1);
    for (const auto& [ident, comps] : identity_comps) CHECK(comps.size() == 1);
}

TEST_CASE("corpus writing and reloading round trips") {
    FaceEmbedder embedder = make_face_embedder();
    Rng rng(19);
    Corpus corpus = generate_corpus(4, 3, rng, embedder);
    auto dir = (std::filesystem::temp_directory_path() / "refkv_corpus").string();
    write_corpus(corpus, dir);
    Corpus back = load_corpus(dir);
    CHECK(back.ids == corpus.ids);
    CHECK(back.identity == corpus.identity);
    REQUIRE(back.images.size() == corpus.images.size());
    for (size_t i = 0; i < back.images.size(); ++i)
        CHECK(oracles::max_abs_diff(back.images[i], corpus.images[i]) <= 0.5 / 255.0 + 1e-9);
    CHECK(back.embeddings.matrix.checksum() == corpus.embeddings.matrix.checksum());
    std::filesystem::remove_all(dir);
}

TEST_CASE("regeneration under a fixed seed is deterministic") {
    FaceEmbedder embedder = make_face_embedder();
    Rng r1(23), r2(23);
    Corpus a = generate_corpus(5, 4, r1, embedder);
    Corpus b = generate_corpus(5, 4, r2, embedder);
    for (size_t i = 0; i < a.images.size(); ++i)
        CHECK(a.images[i].checksum() == b.images[i].checksum());
    CHECK(a.embeddings.matrix.checksum() == b.embeddings.matrix.checksum());
}

TEST_CASE("manifest counts match the corpus") {
    FaceEmbedder embedder = make_face_embedder();
    Rng rng(29);
    Corpus corpus = generate_corpus(6, 5, rng, embedder);
    CHECK(corpus.ids.size() == 30);
    std::map<int, int> per_id;
    for (int ident : corpus.identity) ++per_id[ident];
    CHECK(per_id.size() == 6);
    for (const auto& [id, n] : per_id) CHECK(n == 5);
}
