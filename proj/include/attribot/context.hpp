#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "attribot/tokens.hpp"

namespace attribot {

// One contiguous chunk of context text (a sentence or paragraph) plus its
// token form. The token form includes one trailing separator so that
// removing the source removes its separator too.
struct Source {
    std::string text;   // source text, separator excluded
    TokenSeq tokens;    // tokenize(text + separator)
};

struct SourceGroup {
    std::vector<Source> sources;
};

// Ordered groups of ordered sources. Concatenating all source texts in
// order reconstructs the context text exactly.
class ContextPartition {
public:
    ContextPartition() = default;

    // Throws if any source is empty after tokenization or there are no
    // sources at all.
    static ContextPartition from_texts(
        const std::vector<std::vector<std::string>>& groups,
        const std::string& separator = "\n");

    const std::vector<SourceGroup>& groups() const { return groups_; }
    const std::string& separator() const { return separator_; }

    int num_groups() const { return static_cast<int>(groups_.size()); }
    int num_sources() const;                 // |C|
    std::vector<int> group_sizes() const;    // M_i per group

    // Flattened source order; index ranges over [0, num_sources()).
    const Source& source(int flat_index) const;
    int group_of(int flat_index) const;
    std::string context_text() const; // concatenation of source texts

private:
    std::vector<SourceGroup> groups_;
    std::string separator_ = "\n";
};

// Token-level prompt with per-source spans. Spans are contiguous,
// non-overlapping, in context order, and exactly tile the region between
// preamble and suffix, so deleting spans yields ablated prompts that share
// a bit-identical prefix with the full prompt.
struct PromptLayout {
    TokenSeq full_prompt;
    Span preamble;                       // [0, preamble.end)
    std::vector<Span> source_spans;      // one per source, flattened order
    Span suffix;                         // [suffix.begin, full_prompt.size())
    TokenSeq response;                   // may be empty until generated

    std::vector<std::vector<int>> groups; // flat source indices per group
    std::vector<std::string> source_texts;
    // Identity of each source in the example it came from; sub_layout
    // composes this, so a source keeps its original id through pruning.
    std::vector<int> source_ids;
    std::string tokenizer_id = kByteTokenizerId;

    int num_sources() const { return static_cast<int>(source_spans.size()); }
    int num_groups() const { return static_cast<int>(groups.size()); }
};

struct Example {
    std::string id;
    std::string query;
    ContextPartition partition;
    std::optional<std::string> response;
};

struct PromptTemplate {
    // Must contain {context} exactly once and {question} at least once.
    std::string text =
        "Answer the question based on the provided context\n"
        "Context:\n"
        "{context}\n"
        "Question: {question}";
};

PromptLayout build_prompt(const PromptTemplate& tmpl,
                          const ContextPartition& partition,
                          const std::string& query);

// Full prompt with the removed spans deleted. Tokens before the smallest
// removed span are bit-identical to full_prompt.
TokenSeq ablate_prompt(const PromptLayout& layout,
                       const std::set<int>& removed);

// Number of tokens of full_prompt shared verbatim by the ablated prompt:
// preamble plus every span before the first removed one.
int32_t shared_prefix_len(const PromptLayout& layout,
                          const std::vector<int>& removed_sorted);

// Layout over the shortened context that keeps only the given sources, in
// original order. Group structure is restricted accordingly; groups left
// empty are dropped. Token content equals ablate_prompt of the complement.
PromptLayout sub_layout(const PromptLayout& layout,
                        const std::vector<int>& kept_sorted);

} // namespace attribot
