#include "ll3da/textio.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace ll3da {

namespace {

const char* kReservedNames[] = {"<pad>", "<bos>", "<eos>",  "<unk>", "### human:",
                                "### assistant:", "<loc>",  "</loc>", "<obj>", "</obj>",
                                ",",     ".",     "?",      "!",      ":",     ";",
                                "\""};

// strings the scanner matches atomically at any position
const char* kAtomic[] = {"### human:", "### assistant:", "<loc>", "</loc>",
                         "<obj>",      "</obj>",         "<pad>", "<bos>",
                         "<eos>",      "<unk>"};

bool is_word_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '\'' || c == '_';
}

bool is_integer_literal(const std::string& s) {
    if (s.empty() || s.size() > 3) return false;
    for (char c : s)
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    if (s.size() > 1 && s[0] == '0') return false;
    return std::stoi(s) <= 255;
}

bool is_punct_token(const std::string& s) {
    return s.size() == 1 && !is_word_char(s[0]);
}

}  // namespace

void TokenSequence::append(const TokenSequence& other) {
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    loss_mask.insert(loss_mask.end(), other.loss_mask.begin(), other.loss_mask.end());
}

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        if (std::isspace(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        bool matched = false;
        for (const char* atom : kAtomic) {
            size_t len = std::char_traits<char>::length(atom);
            if (text.compare(i, len, atom) == 0) {
                out.emplace_back(atom);
                i += len;
                matched = true;
                break;
            }
        }
        if (matched) continue;
        if (is_word_char(text[i])) {
            size_t j = i;
            while (j < text.size() && is_word_char(text[j])) ++j;
            std::string w = text.substr(i, j - i);
            for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            out.push_back(std::move(w));
            i = j;
        } else {
            out.push_back(std::string(1, text[i]));
            ++i;
        }
    }
    return out;
}

void Vocabulary::rebuild_index() {
    index_.clear();
    for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus) {
    Vocabulary v;
    for (const char* r : kReservedNames) v.tokens_.emplace_back(r);
    for (int i = 0; i <= 255; ++i) v.tokens_.push_back(std::to_string(i));

    std::map<std::string, int64_t> freq;
    for (const std::string& line : corpus)
        for (const std::string& tok : tokenize_words(line)) {
            bool reserved = false;
            for (const char* r : kReservedNames) reserved = reserved || tok == r;
            if (reserved || is_integer_literal(tok)) continue;
            ++freq[tok];
        }
    std::vector<std::pair<std::string, int64_t>> order(freq.begin(), freq.end());
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (auto& [tok, cnt] : order) v.tokens_.push_back(tok);
    v.rebuild_index();
    return v;
}

Vocabulary Vocabulary::from_token_list(const std::vector<std::string>& tokens) {
    if (tokens.size() < first_corpus_id) throw data_error("vocabulary: token list too short");
    for (int i = 0; i < first_integer_id; ++i)
        if (tokens[i] != kReservedNames[i])
            throw data_error("vocabulary: reserved token mismatch at id " + std::to_string(i));
    for (int i = 0; i <= 255; ++i)
        if (tokens[first_integer_id + i] != std::to_string(i))
            throw data_error("vocabulary: integer token mismatch at value " + std::to_string(i));
    Vocabulary v;
    v.tokens_ = tokens;
    v.rebuild_index();
    if (v.index_.size() != tokens.size()) throw data_error("vocabulary: duplicate token");
    return v;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || id >= size()) throw data_error("vocabulary: id out of range");
    return tokens_[id];
}

// ---- coordinate codec -------------------------------------------------------

int quantize_coord(double x, double lo, double hi) {
    if (!(hi > lo)) throw data_error("quantize_coord: degenerate bounds");
    double v = (x - lo) / (hi - lo) * 255.0;
    int q = static_cast<int>(std::floor(v + 0.5));
    return std::clamp(q, 0, 255);
}

double dequantize_coord(int q, double lo, double hi) {
    if (q < 0 || q > 255) throw data_error("dequantize_coord: value out of range");
    if (!(hi > lo)) throw data_error("dequantize_coord: degenerate bounds");
    return lo + (static_cast<double>(q) / 255.0) * (hi - lo);
}

SpatialToken spatial_from_point(const Vec3& p, const SceneBounds& bounds) {
    SpatialToken t;
    t.kind = SpatialToken::Kind::point;
    for (int a = 0; a < 3; ++a) t.values[a] = quantize_coord(p[a], bounds.lo[a], bounds.hi[a]);
    return t;
}

SpatialToken spatial_from_box(const Box3D& b, const SceneBounds& bounds) {
    SpatialToken t;
    t.kind = SpatialToken::Kind::box;
    for (int a = 0; a < 3; ++a)
        t.values[a] = quantize_coord(b.center[a], bounds.lo[a], bounds.hi[a]);
    for (int a = 0; a < 3; ++a) {
        // a zero-size box would be unrecoverable, so sizes floor at 1
        t.values[3 + a] = std::max(1, quantize_coord(b.size[a], 0.0, bounds.hi[a] - bounds.lo[a]));
    }
    return t;
}

Vec3 point_from_spatial(const SpatialToken& t, const SceneBounds& bounds) {
    if (t.kind != SpatialToken::Kind::point) throw data_error("point_from_spatial: not a point");
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = dequantize_coord(t.values[a], bounds.lo[a], bounds.hi[a]);
    return p;
}

Box3D box_from_spatial(const SpatialToken& t, const SceneBounds& bounds) {
    if (t.kind != SpatialToken::Kind::box) throw data_error("box_from_spatial: not a box");
    Box3D b;
    for (int a = 0; a < 3; ++a) {
        b.center[a] = dequantize_coord(t.values[a], bounds.lo[a], bounds.hi[a]);
        b.size[a] = dequantize_coord(t.values[3 + a], 0.0, bounds.hi[a] - bounds.lo[a]);
    }
    return b;
}

std::string render_spatial(const SpatialToken& t) {
    std::string out = t.kind == SpatialToken::Kind::point ? "<loc>" : "<obj>";
    for (int i = 0; i < t.arity(); ++i) {
        if (i) out += ", ";
        out += std::to_string(t.values[i]);
    }
    out += t.kind == SpatialToken::Kind::point ? "</loc>" : "</obj>";
    return out;
}

SpatialParse parse_spatial(const std::string& text) {
    SpatialParse result;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t loc = text.find("<loc>", pos);
        size_t obj = text.find("<obj>", pos);
        size_t open = std::min(loc, obj);
        if (open == std::string::npos) break;
        const bool is_point = open == loc;
        const std::string close = is_point ? "</loc>" : "</obj>";
        const size_t body_begin = open + 5;
        size_t end = text.find(close, body_begin);
        if (end == std::string::npos) {
            ++result.skipped;
            pos = body_begin;
            continue;
        }
        std::string body = text.substr(body_begin, end - body_begin);

        SpatialToken t;
        t.kind = is_point ? SpatialToken::Kind::point : SpatialToken::Kind::box;
        bool ok = true;
        int count = 0;
        size_t p = 0;
        while (ok && p <= body.size()) {
            size_t comma = body.find(',', p);
            std::string piece = body.substr(p, comma == std::string::npos ? std::string::npos
                                                                          : comma - p);
            // trim
            size_t b = piece.find_first_not_of(" \t\n\r");
            size_t e = piece.find_last_not_of(" \t\n\r");
            if (b == std::string::npos) {
                ok = false;
                break;
            }
            piece = piece.substr(b, e - b + 1);
            if (piece.empty() || piece.size() > 3 ||
                piece.find_first_not_of("0123456789") != std::string::npos) {
                ok = false;
                break;
            }
            int value = std::stoi(piece);
            if (value > 255 || count >= t.arity()) {
                ok = false;
                break;
            }
            t.values[count++] = value;
            if (comma == std::string::npos) break;
            p = comma + 1;
        }
        ok = ok && count == t.arity();
        if (ok && t.kind == SpatialToken::Kind::box)
            for (int a = 3; a < 6; ++a) ok = ok && t.values[a] >= 1;

        if (ok) {
            result.tokens.push_back(t);
            pos = end + close.size();
        } else {
            ++result.skipped;
            pos = body_begin;
        }
    }
    return result;
}

// ---- encode / decode ----------------------------------------------------------

TokenSequence encode_text(const std::string& text, const Vocabulary& v) {
    TokenSequence seq;
    for (const std::string& tok : tokenize_words(text)) {
        seq.ids.push_back(v.id_of(tok));
        seq.loss_mask.push_back(0);
    }
    return seq;
}

std::string decode_tokens(const std::vector<int>& ids, const Vocabulary& v) {
    std::string out;
    for (int id : ids) {
        const std::string& tok = v.token_of(id);
        if (!out.empty() && !is_punct_token(tok)) out += ' ';
        out += tok;
    }
    return out;
}

// ---- instruction templates -------------------------------------------------------

namespace {

std::string template_body(TemplateId id) {
    switch (id) {
        case TemplateId::densecap:
            return "describe this object in the given 3D scene.";
        case TemplateId::densecap_localize:
            return "given the 3D scene, localize and describe this object.";
        case TemplateId::qa:
            return "given the 3D scene, answer the question: \"{question}\"";
        case TemplateId::qa_localize:
            return "answer the question: \"{question}\" with the related object locations in the "
                   "input 3D scene.";
        case TemplateId::scene_description:
            return "describe this 3D scene";
        case TemplateId::planning_full:
            return "{goal} What should I do?";
        case TemplateId::planning_next:
            return "{goal} I have done these things: {done} What should I do next?";
        case TemplateId::detect:
            return "what is this object?";
        case TemplateId::raw:
            return "{text}";
    }
    throw usage_error("instruction_text: unknown template");
}

}  // namespace

std::string instruction_text(TemplateId id, const std::map<std::string, std::string>& fields) {
    std::string body = template_body(id);
    std::string out;
    size_t pos = 0;
    while (pos < body.size()) {
        size_t open = body.find('{', pos);
        if (open == std::string::npos) {
            out += body.substr(pos);
            break;
        }
        size_t close = body.find('}', open);
        out += body.substr(pos, open - pos);
        std::string name = body.substr(open + 1, close - open - 1);
        auto it = fields.find(name);
        if (it == fields.end()) throw usage_error("instruction_text: missing placeholder " + name);
        out += it->second;
        pos = close + 1;
    }
    return out;
}

std::string wrap_instruction(const std::string& body) {
    return "### human: " + body + " ### assistant:";
}

std::string wrap_dialogue(const std::vector<DialogueTurn>& prior, const std::string& human_msg) {
    std::string out;
    for (const DialogueTurn& t : prior) {
        if (t.role == "human")
            out += "### human: " + t.text + " ";
        else if (t.role == "assistant")
            out += "### assistant: " + t.text + " ";
        else
            throw data_error("wrap_dialogue: unknown role " + t.role);
    }
    out += "### human: " + human_msg + " ### assistant:";
    return out;
}

TokenSequence build_instruction(TemplateId id, const std::map<std::string, std::string>& fields,
                                const Vocabulary& v) {
    return encode_text(wrap_instruction(instruction_text(id, fields)), v);
}

}  // namespace ll3da
