#include "attribot/context.hpp"

#include <algorithm>

#include "attribot/errors.hpp"

namespace attribot {

ContextPartition ContextPartition::from_texts(
    const std::vector<std::vector<std::string>>& groups,
    const std::string& separator) {
    ContextPartition p;
    p.separator_ = separator;
    int n_sources = 0;
    for (size_t g = 0; g < groups.size(); ++g) {
        SourceGroup sg;
        for (size_t s = 0; s < groups[g].size(); ++s) {
            const std::string& text = groups[g][s];
            Source src;
            src.text = text;
            src.tokens = tokenize(text + separator);
            if (tokenize(text).empty()) {
                throw Error("empty source at group " + std::to_string(g) +
                            ", source " + std::to_string(s));
            }
            sg.sources.push_back(std::move(src));
            ++n_sources;
        }
        if (sg.sources.empty()) {
            throw Error("empty source group at index " + std::to_string(g));
        }
        p.groups_.push_back(std::move(sg));
    }
    if (n_sources == 0) {
        throw Error("context has no sources");
    }
    return p;
}

int ContextPartition::num_sources() const {
    int n = 0;
    for (const auto& g : groups_) n += static_cast<int>(g.sources.size());
    return n;
}

std::vector<int> ContextPartition::group_sizes() const {
    std::vector<int> sizes;
    sizes.reserve(groups_.size());
    for (const auto& g : groups_) sizes.push_back(static_cast<int>(g.sources.size()));
    return sizes;
}

const Source& ContextPartition::source(int flat_index) const {
    int i = flat_index;
    for (const auto& g : groups_) {
        if (i < static_cast<int>(g.sources.size())) return g.sources[i];
        i -= static_cast<int>(g.sources.size());
    }
    throw Error("source index out of range: " + std::to_string(flat_index));
}

int ContextPartition::group_of(int flat_index) const {
    int i = flat_index;
    for (size_t g = 0; g < groups_.size(); ++g) {
        if (i < static_cast<int>(groups_[g].sources.size())) return static_cast<int>(g);
        i -= static_cast<int>(groups_[g].sources.size());
    }
    throw Error("source index out of range: " + std::to_string(flat_index));
}

std::string ContextPartition::context_text() const {
    std::string out;
    for (const auto& g : groups_) {
        for (const auto& s : g.sources) out += s.text;
    }
    return out;
}

namespace {

// Replace every occurrence of `key` in `s` with `value`.
std::string replace_all(std::string s, const std::string& key,
                        const std::string& value) {
    size_t pos = 0;
    while ((pos = s.find(key, pos)) != std::string::npos) {
        s.replace(pos, key.size(), value);
        pos += value.size();
    }
    return s;
}

} // namespace

PromptLayout build_prompt(const PromptTemplate& tmpl,
                          const ContextPartition& partition,
                          const std::string& query) {
    const std::string ctx_key = "{context}";
    const std::string q_key = "{question}";

    size_t ctx_pos = tmpl.text.find(ctx_key);
    if (ctx_pos == std::string::npos) {
        throw Error("template error: missing {context} placeholder");
    }
    if (tmpl.text.find(ctx_key, ctx_pos + 1) != std::string::npos) {
        throw Error("template error: {context} appears more than once");
    }
    if (tmpl.text.find(q_key) == std::string::npos) {
        throw Error("template error: missing {question} placeholder");
    }

    std::string preamble_text =
        replace_all(tmpl.text.substr(0, ctx_pos), q_key, query);
    std::string suffix_text =
        replace_all(tmpl.text.substr(ctx_pos + ctx_key.size()), q_key, query);

    PromptLayout layout;
    layout.full_prompt = tokenize(preamble_text);
    layout.preamble = Span{0, static_cast<int32_t>(layout.full_prompt.size())};

    int flat = 0;
    for (size_t g = 0; g < partition.groups().size(); ++g) {
        std::vector<int> member_indices;
        for (const auto& src : partition.groups()[g].sources) {
            Span span;
            span.begin = static_cast<int32_t>(layout.full_prompt.size());
            layout.full_prompt.insert(layout.full_prompt.end(),
                                      src.tokens.begin(), src.tokens.end());
            span.end = static_cast<int32_t>(layout.full_prompt.size());
            layout.source_spans.push_back(span);
            layout.source_texts.push_back(src.text);
            layout.source_ids.push_back(flat);
            member_indices.push_back(flat++);
        }
        layout.groups.push_back(std::move(member_indices));
    }

    layout.suffix.begin = static_cast<int32_t>(layout.full_prompt.size());
    TokenSeq suffix_tokens = tokenize(suffix_text);
    layout.full_prompt.insert(layout.full_prompt.end(),
                              suffix_tokens.begin(), suffix_tokens.end());
    layout.suffix.end = static_cast<int32_t>(layout.full_prompt.size());
    return layout;
}

TokenSeq ablate_prompt(const PromptLayout& layout,
                       const std::set<int>& removed) {
    for (int i : removed) {
        if (i < 0 || i >= layout.num_sources()) {
            throw Error("ablate_prompt: source index out of range: " +
                        std::to_string(i));
        }
    }
    TokenSeq out;
    out.reserve(layout.full_prompt.size());
    out.insert(out.end(), layout.full_prompt.begin(),
               layout.full_prompt.begin() + layout.preamble.end);
    for (int i = 0; i < layout.num_sources(); ++i) {
        if (removed.count(i)) continue;
        const Span& s = layout.source_spans[i];
        out.insert(out.end(), layout.full_prompt.begin() + s.begin,
                   layout.full_prompt.begin() + s.end);
    }
    out.insert(out.end(), layout.full_prompt.begin() + layout.suffix.begin,
               layout.full_prompt.begin() + layout.suffix.end);
    return out;
}

int32_t shared_prefix_len(const PromptLayout& layout,
                          const std::vector<int>& removed_sorted) {
    if (removed_sorted.empty()) {
        return static_cast<int32_t>(layout.full_prompt.size());
    }
    return layout.source_spans[removed_sorted.front()].begin;
}

PromptLayout sub_layout(const PromptLayout& layout,
                        const std::vector<int>& kept_sorted) {
    if (kept_sorted.empty()) {
        throw Error("sub_layout: must keep at least one source");
    }
    if (!std::is_sorted(kept_sorted.begin(), kept_sorted.end())) {
        throw Error("sub_layout: kept indices must be sorted");
    }

    PromptLayout out;
    out.tokenizer_id = layout.tokenizer_id;
    out.response = layout.response;

    out.full_prompt.assign(layout.full_prompt.begin(),
                           layout.full_prompt.begin() + layout.preamble.end);
    out.preamble = layout.preamble;

    std::vector<int> new_index(layout.num_sources(), -1);
    for (int k : kept_sorted) {
        if (k < 0 || k >= layout.num_sources()) {
            throw Error("sub_layout: source index out of range: " +
                        std::to_string(k));
        }
        const Span& s = layout.source_spans[k];
        Span span;
        span.begin = static_cast<int32_t>(out.full_prompt.size());
        out.full_prompt.insert(out.full_prompt.end(),
                               layout.full_prompt.begin() + s.begin,
                               layout.full_prompt.begin() + s.end);
        span.end = static_cast<int32_t>(out.full_prompt.size());
        new_index[k] = static_cast<int>(out.source_spans.size());
        out.source_spans.push_back(span);
        out.source_texts.push_back(layout.source_texts[k]);
        out.source_ids.push_back(layout.source_ids[k]);
    }

    out.suffix.begin = static_cast<int32_t>(out.full_prompt.size());
    out.full_prompt.insert(out.full_prompt.end(),
                           layout.full_prompt.begin() + layout.suffix.begin,
                           layout.full_prompt.begin() + layout.suffix.end);
    out.suffix.end = static_cast<int32_t>(out.full_prompt.size());

    for (const auto& members : layout.groups) {
        std::vector<int> kept_members;
        for (int m : members) {
            if (new_index[m] >= 0) kept_members.push_back(new_index[m]);
        }
        if (!kept_members.empty()) out.groups.push_back(std::move(kept_members));
    }
    return out;
}

} // namespace attribot
