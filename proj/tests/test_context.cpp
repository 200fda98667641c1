#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <set>
#include <string>

#include "attribot/context.hpp"
#include "attribot/errors.hpp"
#include "attribot/tokens.hpp"

using namespace attribot;

namespace {

// Random valid UTF-8 string mixing ASCII, 2/3/4-byte code points.
std::string random_utf8(std::mt19937_64& rng, int max_cps = 24) {
    auto u = [&](uint64_t m) { return rng() % m; };
    std::string s;
    int n = static_cast<int>(u(max_cps + 1));
    for (int i = 0; i < n; ++i) {
        uint32_t cp = 0;
        switch (u(4)) {
            case 0: cp = 0x20 + static_cast<uint32_t>(u(0x5f)); break;
            case 1: cp = 0xa1 + static_cast<uint32_t>(u(0x600)); break;
            case 2: cp = 0x4e00 + static_cast<uint32_t>(u(0x1000)); break;
            default: cp = 0x1f300 + static_cast<uint32_t>(u(0x100)); break;
        }
        if (cp >= 0xd800 && cp <= 0xdfff) cp = 0x40;
        if (cp < 0x80) {
            s += char(cp);
        } else if (cp < 0x800) {
            s += char(0xc0 | (cp >> 6));
            s += char(0x80 | (cp & 0x3f));
        } else if (cp < 0x10000) {
            s += char(0xe0 | (cp >> 12));
            s += char(0x80 | ((cp >> 6) & 0x3f));
            s += char(0x80 | (cp & 0x3f));
        } else {
            s += char(0xf0 | (cp >> 18));
            s += char(0x80 | ((cp >> 12) & 0x3f));
            s += char(0x80 | ((cp >> 6) & 0x3f));
            s += char(0x80 | (cp & 0x3f));
        }
    }
    return s;
}

PromptTemplate tiny_template() {
    PromptTemplate t;
    t.text = "P:{context}Q:{question}";
    return t;
}

} // namespace

TEST_CASE("tokenize byte values") {
    CHECK(tokenize("ab") == TokenSeq{97, 98});
    CHECK(tokenize("").empty());
}

TEST_CASE("tokenize/detokenize round-trips random UTF-8") {
    std::mt19937_64 rng(7);
    for (int i = 0; i < 100; ++i) {
        std::string s = random_utf8(rng);
        CHECK(detokenize(tokenize(s)) == s);
    }
}

TEST_CASE("tokenize is concatenation-compatible") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 50; ++i) {
        std::string a = random_utf8(rng);
        std::string b = random_utf8(rng);
        TokenSeq joined = tokenize(a);
        TokenSeq tb = tokenize(b);
        joined.insert(joined.end(), tb.begin(), tb.end());
        CHECK(joined == tokenize(a + b));
    }
}

TEST_CASE("partition rejects empty sources and preserves context text") {
    CHECK_THROWS_AS(ContextPartition::from_texts({{"a", ""}}), Error);
    CHECK_THROWS_AS(ContextPartition::from_texts({{}}), Error);
    CHECK_THROWS_AS(ContextPartition::from_texts({}), Error);

    auto p = ContextPartition::from_texts({{"ab", "c"}, {"de"}});
    CHECK(p.num_sources() == 3);
    CHECK(p.num_groups() == 2);
    CHECK(p.group_sizes() == std::vector<int>{2, 1});
    CHECK(p.context_text() == "abcde");
    CHECK(p.group_of(0) == 0);
    CHECK(p.group_of(2) == 1);
}

TEST_CASE("build_prompt records spans with trailing separators") {
    // Two one-byte sources with "\n" separators: each span is 2 tokens.
    auto p = ContextPartition::from_texts({{"a", "b"}});
    PromptLayout layout = build_prompt(tiny_template(), p, "q");

    int pre = layout.preamble.end;
    CHECK(pre == 2); // "P:"
    REQUIRE(layout.source_spans.size() == 2);
    CHECK(layout.source_spans[0] == Span{pre, pre + 2});
    CHECK(layout.source_spans[1] == Span{pre + 2, pre + 4});
    CHECK(layout.suffix.begin == pre + 4);
    CHECK(detokenize(layout.full_prompt) == "P:a\nb\nQ:q");

    // Removing nothing reproduces the full prompt.
    CHECK(ablate_prompt(layout, {}) == layout.full_prompt);
}

TEST_CASE("build_prompt rejects missing placeholders") {
    auto p = ContextPartition::from_texts({{"a"}});
    PromptTemplate no_ctx;
    no_ctx.text = "Q:{question}";
    CHECK_THROWS_AS(build_prompt(no_ctx, p, "q"), Error);
    PromptTemplate no_q;
    no_q.text = "P:{context}";
    CHECK_THROWS_AS(build_prompt(no_q, p, "q"), Error);
}

TEST_CASE("ablate_prompt span arithmetic") {
    auto p = ContextPartition::from_texts({{"ab", "cde", "f"}});
    PromptLayout layout = build_prompt(tiny_template(), p, "why");

    SUBCASE("single removal shrinks by exactly the span size") {
        for (int i = 0; i < 3; ++i) {
            TokenSeq ablated = ablate_prompt(layout, {i});
            CHECK(int(layout.full_prompt.size() - ablated.size()) ==
                  layout.source_spans[i].size());
        }
    }
    SUBCASE("removing the middle source keeps the prefix bit-identical") {
        TokenSeq ablated = ablate_prompt(layout, {1});
        int32_t boundary = layout.source_spans[1].begin;
        for (int32_t t = 0; t < boundary; ++t) {
            CHECK(ablated[t] == layout.full_prompt[t]);
        }
    }
    SUBCASE("out-of-range index is rejected") {
        CHECK_THROWS_AS(ablate_prompt(layout, {3}), Error);
        CHECK_THROWS_AS(ablate_prompt(layout, {-1}), Error);
    }
}

TEST_CASE("spans tile the region between preamble and suffix") {
    std::mt19937_64 rng(23);
    for (int it = 0; it < 40; ++it) {
        int n_groups = 1 + int(rng() % 4);
        std::vector<std::vector<std::string>> groups(n_groups);
        for (auto& g : groups) {
            int n_src = 1 + int(rng() % 4);
            for (int s = 0; s < n_src; ++s) {
                std::string text = random_utf8(rng, 8);
                if (text.empty()) text = "x";
                g.push_back(text);
            }
        }
        auto p = ContextPartition::from_texts(groups);
        PromptLayout layout = build_prompt(PromptTemplate{}, p, "query?");

        int32_t cursor = layout.preamble.end;
        int64_t span_total = 0;
        for (const Span& s : layout.source_spans) {
            CHECK(s.begin == cursor);
            CHECK(s.end > s.begin);
            cursor = s.end;
            span_total += s.size();
        }
        CHECK(cursor == layout.suffix.begin);
        CHECK(layout.suffix.end == int32_t(layout.full_prompt.size()));
        CHECK(span_total + layout.preamble.size() + layout.suffix.size() ==
              int64_t(layout.full_prompt.size()));

        // Each span equals the independent tokenization of source + "\n".
        int flat = 0;
        for (const auto& g : groups) {
            for (const auto& text : g) {
                const Span& s = layout.source_spans[flat++];
                TokenSeq expect = tokenize(text + "\n");
                TokenSeq got(layout.full_prompt.begin() + s.begin,
                             layout.full_prompt.begin() + s.end);
                CHECK(got == expect);
            }
        }
    }
}

TEST_CASE("prefix sharing holds for every single-source ablation") {
    auto p = ContextPartition::from_texts({{"alpha", "bravo"}, {"charlie"}});
    PromptLayout layout = build_prompt(PromptTemplate{}, p, "q");
    for (int i = 0; i < layout.num_sources(); ++i) {
        TokenSeq ablated = ablate_prompt(layout, {i});
        std::vector<int> removed{i};
        int32_t shared = shared_prefix_len(layout, removed);
        CHECK(shared == layout.source_spans[i].begin);
        for (int32_t t = 0; t < shared; ++t) {
            CHECK(ablated[t] == layout.full_prompt[t]);
        }
    }
}

TEST_CASE("layouts are deterministic") {
    auto p = ContextPartition::from_texts({{"one", "two"}, {"three"}});
    PromptLayout a = build_prompt(PromptTemplate{}, p, "q?");
    PromptLayout b = build_prompt(PromptTemplate{}, p, "q?");
    CHECK(a.full_prompt == b.full_prompt);
    CHECK(a.source_spans == b.source_spans);
    CHECK(a.preamble == b.preamble);
    CHECK(a.suffix == b.suffix);
}

TEST_CASE("sub_layout equals the ablated complement") {
    auto p = ContextPartition::from_texts({{"aa", "bb"}, {"cc", "dd"}});
    PromptLayout layout = build_prompt(PromptTemplate{}, p, "q");

    PromptLayout sub = sub_layout(layout, {0, 3});
    CHECK(sub.full_prompt == ablate_prompt(layout, {1, 2}));
    REQUIRE(sub.num_sources() == 2);
    CHECK(sub.source_texts == std::vector<std::string>{"aa", "dd"});
    REQUIRE(sub.num_groups() == 2); // both groups keep one member
    CHECK(sub.groups[0] == std::vector<int>{0});
    CHECK(sub.groups[1] == std::vector<int>{1});

    // Dropping a whole group drops it from the group structure.
    PromptLayout sub2 = sub_layout(layout, {2, 3});
    CHECK(sub2.num_groups() == 1);
    CHECK(sub2.groups[0] == std::vector<int>{0, 1});

    CHECK_THROWS_AS(sub_layout(layout, {}), Error);
    CHECK_THROWS_AS(sub_layout(layout, {5}), Error);
}
