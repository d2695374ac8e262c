#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ll3da/common.hpp"
#include "ll3da/geometry.hpp"

namespace ll3da {

/// Token ids plus a per-token loss mask (true on response tokens only).
struct TokenSequence {
    std::vector<int> ids;
    std::vector<uint8_t> loss_mask;

    size_t size() const { return ids.size(); }
    void append(const TokenSequence& other);
};

/// Word-level vocabulary with fixed reserved ids and atomic integer
/// literals "0".."255". Serializes as an ordered token list, one per line.
class Vocabulary {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;
    static constexpr int human_id = 4;
    static constexpr int assistant_id = 5;
    static constexpr int loc_open_id = 6;
    static constexpr int loc_close_id = 7;
    static constexpr int obj_open_id = 8;
    static constexpr int obj_close_id = 9;
    // ids 10..16 hold the always-available punctuation , . ? ! : ; "
    static constexpr int first_integer_id = 17;  // "0".."255" occupy 17..272
    static constexpr int first_corpus_id = 273;

    static Vocabulary build(const std::vector<std::string>& corpus);
    static Vocabulary from_token_list(const std::vector<std::string>& tokens);

    const std::vector<std::string>& token_list() const { return tokens_; }
    int size() const { return static_cast<int>(tokens_.size()); }
    int id_of(const std::string& token) const;  // unk_id when absent
    const std::string& token_of(int id) const;
    static int integer_id(int value) { return first_integer_id + value; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;

    void rebuild_index();
};

/// Lowercasing word/punctuation scanner. Reserved identifier strings and
/// spatial delimiters are matched atomically; every other non-space,
/// non-word character becomes a single-character token.
std::vector<std::string> tokenize_words(const std::string& text);

// ---- coordinate codec ----------------------------------------------------

/// round((x - lo)/(hi - lo) * 255), round-half-up, clamped to [0, 255]
int quantize_coord(double x, double lo, double hi);
/// lo + (q / 255) * (hi - lo)
double dequantize_coord(int q, double lo, double hi);

struct SpatialToken {
    enum class Kind { point, box };
    Kind kind = Kind::point;
    std::array<int, 6> values{};  // first 3 used for points

    int arity() const { return kind == Kind::point ? 3 : 6; }
    bool operator==(const SpatialToken&) const = default;
};

SpatialToken spatial_from_point(const Vec3& p, const SceneBounds& bounds);
/// Size components quantize against the axis extent with a floor of 1.
SpatialToken spatial_from_box(const Box3D& b, const SceneBounds& bounds);
Vec3 point_from_spatial(const SpatialToken& t, const SceneBounds& bounds);
Box3D box_from_spatial(const SpatialToken& t, const SceneBounds& bounds);

/// "<loc>a, b, c</loc>" / "<obj>a, b, c, d, e, f</obj>"
std::string render_spatial(const SpatialToken& t);

struct SpatialParse {
    std::vector<SpatialToken> tokens;
    int skipped = 0;  // malformed spans (wrong arity, out of range, zero box size)
};

/// Lenient scan over arbitrary text; malformed spans are skipped and counted.
SpatialParse parse_spatial(const std::string& text);

// ---- encode / decode -------------------------------------------------------

TokenSequence encode_text(const std::string& text, const Vocabulary& v);
/// Joins with single spaces except before single-character punctuation.
std::string decode_tokens(const std::vector<int>& ids, const Vocabulary& v);

// ---- instruction templates --------------------------------------------------

enum class TemplateId {
    densecap,
    densecap_localize,
    qa,
    qa_localize,
    scene_description,
    planning_full,
    planning_next,
    detect,
    raw,
};

/// Template body without the role identifiers; placeholders are {name}.
std::string instruction_text(TemplateId id, const std::map<std::string, std::string>& fields);

/// "### human: {body} ### assistant:"
std::string wrap_instruction(const std::string& body);

struct DialogueTurn {
    std::string role;  // "human" | "assistant"
    std::string text;
};

/// Prior turns verbatim, then the current human message and a trailing
/// assistant identifier.
std::string wrap_dialogue(const std::vector<DialogueTurn>& prior, const std::string& human_msg);

TokenSequence build_instruction(TemplateId id, const std::map<std::string, std::string>& fields,
                                const Vocabulary& v);

}  // namespace ll3da
