#pragma once

// Byte-level tokenization, packed corpora, batching, and the token-set
// filtering procedure used to strip sequences containing tokens absent from a
// reference corpus.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

// 256 byte tokens plus one end-of-text token.
class ByteVocab {
public:
    static constexpr int32_t kDefaultEot = 256;

    explicit ByteVocab(int32_t eot_id = kDefaultEot) : eot_(eot_id) {
        if (eot_id < 256) throw ConfigError("byte vocab: eot id must be >= 256");
    }

    int32_t vocab_size() const { return eot_ + 1; }
    int32_t eot_id() const { return eot_; }

    std::vector<int32_t> tokenize(const std::string& text) const {
        std::vector<int32_t> out;
        out.reserve(text.size());
        for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
        return out;
    }

    std::string detokenize(const std::vector<int32_t>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int32_t id : ids) {
            if (id == eot_) continue;  // eot has no byte image
            if (id < 0 || id > 255) throw InputError("detokenize: non-byte token id " + std::to_string(id));
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
        return out;
    }

private:
    int32_t eot_;
};

struct TokenizedCorpus {
    std::vector<int32_t> ids;
    std::vector<int64_t> doc_starts;  // offset of each document's first token
    int32_t vocab_size = 257;
    std::string provenance;

    int64_t size() const { return static_cast<int64_t>(ids.size()); }
    int64_t n_docs() const { return static_cast<int64_t>(doc_starts.size()); }

    // [start, end) token range of document d.
    std::pair<int64_t, int64_t> doc_range(int64_t d) const {
        const int64_t start = doc_starts[static_cast<size_t>(d)];
        const int64_t end = d + 1 < n_docs() ? doc_starts[static_cast<size_t>(d + 1)] : size();
        return {start, end};
    }

    void validate() const {
        for (int32_t id : ids) {
            if (id < 0 || id >= vocab_size) throw InputError("corpus contains out-of-vocab id " + std::to_string(id));
        }
    }
};

// Newline-delimited documents, packed contiguously with an eot separator
// after each document.
inline TokenizedCorpus corpus_from_text(const std::string& text, const ByteVocab& vocab,
                                        std::string provenance = "") {
    TokenizedCorpus c;
    c.vocab_size = vocab.vocab_size();
    c.provenance = std::move(provenance);
    size_t pos = 0;
    while (pos <= text.size()) {
        const size_t nl = text.find('\n', pos);
        const size_t end = nl == std::string::npos ? text.size() : nl;
        if (end > pos || nl != std::string::npos) {
            c.doc_starts.push_back(c.size());
            for (size_t i = pos; i < end; ++i) {
                c.ids.push_back(static_cast<int32_t>(static_cast<unsigned char>(text[i])));
            }
            c.ids.push_back(vocab.eot_id());
        }
        if (nl == std::string::npos) break;
        pos = nl + 1;
    }
    return c;
}

// Deterministic sampler of [B, seq_len+1] blocks. An epoch visits every
// non-overlapping block of the corpus once, in a seed-shuffled order; further
// epochs reshuffle.
class BatchIterator {
public:
    BatchIterator(const TokenizedCorpus& corpus, int64_t seq_len, int64_t batch_size, uint64_t seed)
        : corpus_(&corpus), block_(seq_len + 1), batch_(batch_size), rng_(seed) {
        if (seq_len < 1 || batch_size < 1) throw ConfigError("batch iterator: seq_len and batch_size must be >= 1");
        if (corpus.size() < block_) {
            throw InputError("corpus too small: " + std::to_string(corpus.size()) + " tokens < block of " +
                             std::to_string(block_));
        }
        const int64_t n_blocks = corpus.size() / block_;
        starts_.reserve(static_cast<size_t>(n_blocks));
        for (int64_t i = 0; i < n_blocks; ++i) starts_.push_back(i * block_);
        reshuffle();
    }

    // Block of token ids [B, seq_len+1]; inputs are [:, :-1], targets [:, 1:].
    TensorI next() {
        TensorI out({batch_, block_});
        for (int64_t b = 0; b < batch_; ++b) {
            if (cursor_ == starts_.size()) reshuffle();
            const int64_t start = starts_[cursor_++];
            std::copy(corpus_->ids.begin() + start, corpus_->ids.begin() + start + block_,
                      out.data.begin() + b * block_);
        }
        return out;
    }

    int64_t blocks_per_epoch() const { return static_cast<int64_t>(starts_.size()); }

private:
    void reshuffle() {
        rng_.shuffle(starts_);
        cursor_ = 0;
    }

    const TokenizedCorpus* corpus_;
    int64_t block_;
    int64_t batch_;
    Rng rng_;
    std::vector<int64_t> starts_;
    size_t cursor_ = 0;
};

inline std::map<int32_t, int64_t> token_frequency(const TokenizedCorpus& corpus) {
    std::map<int32_t, int64_t> counts;
    for (int32_t id : corpus.ids) ++counts[id];
    return counts;
}

struct FilterReportEntry {
    int32_t token_id;
    int64_t count;
};

struct FilterResult {
    TokenizedCorpus corpus;
    std::vector<FilterReportEntry> report;  // sorted by count descending
    int64_t docs_dropped = 0;
};

// Drop every document containing a token id outside the reference-present
// set. The report counts total occurrences of each offending id, largest
// first (ties by ascending id).
inline FilterResult filter_corpus(const TokenizedCorpus& corpus, const std::set<int32_t>& reference_present) {
    FilterResult res;
    res.corpus.vocab_size = corpus.vocab_size;
    res.corpus.provenance = corpus.provenance.empty() ? "filtered" : corpus.provenance + "-filtered";
    std::map<int32_t, int64_t> offending;
    for (int64_t d = 0; d < corpus.n_docs(); ++d) {
        const auto [start, end] = corpus.doc_range(d);
        bool keep = true;
        for (int64_t i = start; i < end; ++i) {
            if (!reference_present.count(corpus.ids[static_cast<size_t>(i)])) keep = false;
        }
        if (keep) {
            res.corpus.doc_starts.push_back(res.corpus.size());
            res.corpus.ids.insert(res.corpus.ids.end(), corpus.ids.begin() + start, corpus.ids.begin() + end);
        } else {
            ++res.docs_dropped;
            for (int64_t i = start; i < end; ++i) {
                const int32_t id = corpus.ids[static_cast<size_t>(i)];
                if (!reference_present.count(id)) ++offending[id];
            }
        }
    }
    for (const auto& [id, count] : offending) res.report.push_back({id, count});
    std::sort(res.report.begin(), res.report.end(), [](const FilterReportEntry& a, const FilterReportEntry& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.token_id < b.token_id;
    });
    return res;
}

// ---------------------------------------------------------------------------
// binary token file: magic, vocab_size, doc count, token count headers, then
// document start offsets and 32-bit little-endian token ids.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kTokenFileMagic = 0x4B4F544Cu;  // "LTOK"

namespace detail {

template <typename V>
void write_le(std::ostream& os, V v) {
    unsigned char buf[sizeof(V)];
    for (size_t i = 0; i < sizeof(V); ++i) buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(V));
}

template <typename V>
V read_le(std::istream& is) {
    unsigned char buf[sizeof(V)];
    is.read(reinterpret_cast<char*>(buf), sizeof(V));
    if (!is) throw IoError("token file truncated");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(V); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return static_cast<V>(v);
}

}  // namespace detail

inline void save_corpus(const TokenizedCorpus& corpus, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    detail::write_le<uint32_t>(os, kTokenFileMagic);
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(corpus.vocab_size));
    detail::write_le<uint64_t>(os, static_cast<uint64_t>(corpus.n_docs()));
    detail::write_le<uint64_t>(os, static_cast<uint64_t>(corpus.size()));
    for (int64_t d : corpus.doc_starts) detail::write_le<uint64_t>(os, static_cast<uint64_t>(d));
    for (int32_t id : corpus.ids) detail::write_le<uint32_t>(os, static_cast<uint32_t>(id));
    if (!os) throw IoError("write failed: " + path);
}

inline TokenizedCorpus load_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    if (detail::read_le<uint32_t>(is) != kTokenFileMagic) throw IoError("not a token file: " + path);
    TokenizedCorpus c;
    c.vocab_size = static_cast<int32_t>(detail::read_le<uint32_t>(is));
    const uint64_t n_docs = detail::read_le<uint64_t>(is);
    const uint64_t n_tokens = detail::read_le<uint64_t>(is);
    c.doc_starts.resize(n_docs);
    for (auto& d : c.doc_starts) d = static_cast<int64_t>(detail::read_le<uint64_t>(is));
    c.ids.resize(n_tokens);
    for (auto& id : c.ids) id = static_cast<int32_t>(detail::read_le<uint32_t>(is));
    c.provenance = path;
    c.validate();
    return c;
}

// Loads a binary token file when the magic matches, otherwise treats the file
// as raw UTF-8 text and tokenizes it.
inline TokenizedCorpus load_corpus_auto(const std::string& path, const ByteVocab& vocab) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open: " + path);
    uint32_t magic = 0;
    probe.read(reinterpret_cast<char*>(&magic), sizeof(magic));
    const bool binary = probe.gcount() == sizeof(magic) && magic == kTokenFileMagic;
    probe.close();
    if (binary) return load_corpus(path);
    std::ifstream is(path, std::ios::binary);
    std::ostringstream buf;
    buf << is.rdbuf();
    if (!is) throw IoError("read failed: " + path);
    return corpus_from_text(buf.str(), vocab, path);
}

// Printable form of a byte token for filter reports ("\t", "\x03", "a", ...).
inline std::string token_repr(int32_t id, int32_t eot_id) {
    if (id == eot_id) return "<eot>";
    if (id < 0 || id > 255) return "<id:" + std::to_string(id) + ">";
    const char c = static_cast<char>(id);
    switch (c) {
        case '\t': return "\\t";
        case '\n': return "\\n";
        case '\r': return "\\r";
        case '\\': return "\\\\";
        case '"': return "\\\"";
        default: break;
    }
    if (id >= 0x20 && id < 0x7F) return std::string(1, c);
    char buf[8];
    std::snprintf(buf, sizeof(buf), "\\x%02x", static_cast<unsigned>(id));
    return std::string(buf);
}

inline std::string filter_report_csv(const std::vector<FilterReportEntry>& report, int32_t eot_id) {
    std::ostringstream os;
    os << "token_id,token_repr,count\n";
    for (const auto& e : report) {
        os << e.token_id << ",\"" << token_repr(e.token_id, eot_id) << "\"," << e.count << "\n";
    }
    return os.str();
}

}  // namespace lnfree
