#include "mael/bencode.hpp"

#include <limits>

namespace mael::bencode {

error::error(errc code, std::size_t offset, const std::string& what)
    : coded_error<errc>(code, what + " at offset " + std::to_string(offset)), offset_(offset)
{
}

namespace {

[[noreturn]] void type_mismatch(const char* wanted)
{
    throw error(errc::invalid_value, 0, std::string("value is not ") + wanted);
}

class parser {
public:
    parser(bytes_view in, const decode_options& opts, std::vector<violation>* violations)
        : in_(in), opts_(opts), violations_(violations)
    {
    }

    std::size_t pos() const { return pos_; }
    bool at_end() const { return pos_ >= in_.size(); }

    value parse_value(std::size_t depth)
    {
        if (at_end()) fail("unexpected end of input");
        char c = in_[pos_];
        if (c == 'i') return value(parse_int());
        if (c >= '0' && c <= '9') return value(parse_string());
        if (c == 'l' || c == 'd') {
            if (depth + 1 > opts_.max_depth) fail("nesting depth exceeds limit");
            return c == 'l' ? value(parse_list(depth + 1)) : value(parse_dict(depth + 1));
        }
        fail("unexpected byte");
    }

    // Advances over one value without building it.
    void skip_value(std::size_t depth)
    {
        if (at_end()) fail("unexpected end of input");
        char c = in_[pos_];
        if (c == 'i') { parse_int(); return; }
        if (c >= '0' && c <= '9') { parse_string_view(); return; }
        if (c == 'l' || c == 'd') {
            if (depth + 1 > opts_.max_depth) fail("nesting depth exceeds limit");
            ++pos_;
            while (true) {
                if (at_end()) fail("unterminated container");
                if (in_[pos_] == 'e') { ++pos_; return; }
                if (c == 'd') parse_string_view();
                skip_value(depth + 1);
            }
        }
        fail("unexpected byte");
    }

    bytes_view parse_string_view()
    {
        std::size_t start = pos_;
        std::uint64_t len = 0;
        std::size_t digits = 0;
        while (!at_end() && in_[pos_] >= '0' && in_[pos_] <= '9') {
            if (len > (std::numeric_limits<std::uint64_t>::max() - 9) / 10) fail("string length overflow");
            len = len * 10 + static_cast<std::uint64_t>(in_[pos_] - '0');
            ++pos_;
            ++digits;
        }
        if (digits == 0) fail("expected string length");
        if (digits > 1 && in_[start] == '0') note(start, "leading zero in string length");
        if (at_end() || in_[pos_] != ':') fail("expected ':' after string length");
        ++pos_;
        if (len > in_.size() - pos_) fail("string exceeds input");
        bytes_view s = in_.substr(pos_, static_cast<std::size_t>(len));
        pos_ += static_cast<std::size_t>(len);
        return s;
    }

    [[noreturn]] void fail(const char* what) const { throw error(errc::malformed_input, pos_, what); }

private:
    void note(std::size_t offset, const char* what)
    {
        if (!opts_.lenient) throw error(errc::malformed_input, offset, what);
        if (violations_) violations_->push_back({offset, what});
    }

    std::int64_t parse_int()
    {
        std::size_t start = pos_;
        ++pos_;  // 'i'
        bool negative = false;
        if (!at_end() && in_[pos_] == '-') {
            negative = true;
            ++pos_;
        }
        std::size_t digits_start = pos_;
        std::uint64_t magnitude = 0;
        const std::uint64_t limit = negative
            ? static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()) + 1
            : static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max());
        while (!at_end() && in_[pos_] >= '0' && in_[pos_] <= '9') {
            auto d = static_cast<std::uint64_t>(in_[pos_] - '0');
            if (magnitude > (limit - d) / 10) fail("integer out of 64-bit range");
            magnitude = magnitude * 10 + d;
            ++pos_;
        }
        std::size_t ndigits = pos_ - digits_start;
        if (ndigits == 0) fail("expected integer digits");
        if (at_end() || in_[pos_] != 'e') fail("unterminated integer");
        ++pos_;
        if (ndigits > 1 && in_[digits_start] == '0') note(start, "leading zero in integer");
        if (negative && magnitude == 0) note(start, "negative zero");
        if (negative) {
            if (magnitude == static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()) + 1)
                return std::numeric_limits<std::int64_t>::min();
            return -static_cast<std::int64_t>(magnitude);
        }
        return static_cast<std::int64_t>(magnitude);
    }

    bytes parse_string() { return bytes(parse_string_view()); }

    list parse_list(std::size_t depth)
    {
        ++pos_;
        list out;
        while (true) {
            if (at_end()) fail("unterminated list");
            if (in_[pos_] == 'e') { ++pos_; return out; }
            out.push_back(parse_value(depth));
        }
    }

    dict parse_dict(std::size_t depth)
    {
        ++pos_;
        dict out;
        std::optional<bytes> previous;
        while (true) {
            if (at_end()) fail("unterminated dictionary");
            if (in_[pos_] == 'e') { ++pos_; return out; }
            std::size_t key_offset = pos_;
            if (in_[pos_] < '0' || in_[pos_] > '9') fail("dictionary key is not a string");
            bytes key = parse_string();
            if (previous) {
                if (key == *previous) note(key_offset, "duplicate dictionary key");
                else if (key < *previous) note(key_offset, "dictionary keys not sorted");
            }
            value v = parse_value(depth);
            // Lenient mode keeps the first occurrence of a duplicated key.
            out.emplace(key, std::move(v));
            previous = std::move(key);
        }
    }

    bytes_view in_;
    const decode_options& opts_;
    std::vector<violation>* violations_;
    std::size_t pos_ = 0;

};

void encode_into(const value& v, bytes& out)
{
    std::visit(
        [&out](const auto& x) {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, std::int64_t>) {
                out.push_back('i');
                out += std::to_string(x);
                out.push_back('e');
            } else if constexpr (std::is_same_v<T, bytes>) {
                out += std::to_string(x.size());
                out.push_back(':');
                out += x;
            } else if constexpr (std::is_same_v<T, list>) {
                out.push_back('l');
                for (const auto& item : x) encode_into(item, out);
                out.push_back('e');
            } else {
                out.push_back('d');
                for (const auto& [k, item] : x) {
                    out += std::to_string(k.size());
                    out.push_back(':');
                    out += k;
                    encode_into(item, out);
                }
                out.push_back('e');
            }
        },
        v.variant());
}

}  // namespace

std::int64_t value::as_int() const
{
    if (auto p = std::get_if<std::int64_t>(&v_)) return *p;
    type_mismatch("an integer");
}

const bytes& value::as_string() const
{
    if (auto p = std::get_if<bytes>(&v_)) return *p;
    type_mismatch("a byte string");
}

const list& value::as_list() const
{
    if (auto p = std::get_if<list>(&v_)) return *p;
    type_mismatch("a list");
}

const dict& value::as_dict() const
{
    if (auto p = std::get_if<dict>(&v_)) return *p;
    type_mismatch("a dictionary");
}

list& value::as_list()
{
    if (auto p = std::get_if<list>(&v_)) return *p;
    type_mismatch("a list");
}

dict& value::as_dict()
{
    if (auto p = std::get_if<dict>(&v_)) return *p;
    type_mismatch("a dictionary");
}

const value* value::find(bytes_view key) const
{
    auto p = std::get_if<dict>(&v_);
    if (!p) return nullptr;
    auto it = p->find(bytes(key));
    return it == p->end() ? nullptr : &it->second;
}

value decode(bytes_view input)
{
    return decode(input, decode_options{}).root;
}

decode_result decode(bytes_view input, const decode_options& opts)
{
    decode_result result;
    if (input.empty()) throw error(errc::malformed_input, 0, "empty input");
    parser p(input, opts, &result.violations);
    result.root = p.parse_value(0);
    if (!p.at_end()) {
        if (!opts.lenient) throw error(errc::malformed_input, p.pos(), "trailing bytes after value");
        result.violations.push_back({p.pos(), "trailing bytes after value"});
    }
    return result;
}

bytes encode(const value& v)
{
    bytes out;
    encode_into(v, out);
    return out;
}

std::optional<std::pair<std::size_t, std::size_t>> dict_value_span(bytes_view input, bytes_view key)
{
    decode_options opts;
    opts.lenient = true;
    if (input.empty() || input[0] != 'd') throw error(errc::malformed_input, 0, "expected dictionary");
    parser validator(input, opts, nullptr);
    validator.skip_value(0);

    // Walk the top-level entries (offsets relative to just past the 'd').
    std::optional<std::pair<std::size_t, std::size_t>> found;
    parser walker(input.substr(1), opts, nullptr);
    while (input[1 + walker.pos()] != 'e') {
        bytes_view k = walker.parse_string_view();
        std::size_t start = 1 + walker.pos();
        walker.skip_value(1);
        if (k == key && !found) found = std::make_pair(start, 1 + walker.pos());
    }
    return found;
}

}  // namespace mael::bencode
