#include "mael/torrent.hpp"

#include <algorithm>

namespace mael::torrent {

std::string file_entry::joined() const
{
    std::string out;
    for (const auto& c : path) {
        if (!out.empty()) out.push_back('/');
        out += c;
    }
    return out;
}

std::int64_t info_dict::total_length() const
{
    if (length) return *length;
    std::int64_t total = 0;
    for (const auto& f : files) total += f.length;
    return total;
}

bytes_view info_dict::piece_hash(std::size_t index) const
{
    return bytes_view(pieces).substr(index * 20, 20);
}

std::int64_t info_dict::piece_size(std::size_t index) const
{
    std::int64_t total = total_length();
    std::int64_t start = static_cast<std::int64_t>(index) * piece_length;
    return std::min(piece_length, total - start);
}

std::vector<file_entry> info_dict::file_list() const
{
    if (length) return {file_entry{{name}, *length}};
    return files;
}

bencode::value info_dict::to_bencode() const
{
    bencode::dict d = extra;
    d["name"] = bencode::value(name);
    d["piece length"] = bencode::value(piece_length);
    d["pieces"] = bencode::value(pieces);
    if (length) {
        d["length"] = bencode::value(*length);
    } else {
        bencode::list fl;
        for (const auto& f : files) {
            bencode::list path;
            for (const auto& c : f.path) path.emplace_back(c);
            fl.emplace_back(bencode::dict{{"length", bencode::value(f.length)}, {"path", bencode::value(path)}});
        }
        d["files"] = bencode::value(std::move(fl));
    }
    return bencode::value(std::move(d));
}

namespace {

std::int64_t require_int(const bencode::value& d, const char* key)
{
    const auto* v = d.find(key);
    if (!v) throw error(errc::missing_field, std::string("info dictionary lacks '") + key + "'");
    if (!v->is_int()) throw error(errc::malformed_input, std::string("'") + key + "' is not an integer");
    return v->as_int();
}

info_dict info_from_value(const bencode::value& v)
{
    if (!v.is_dict()) throw error(errc::malformed_input, "info is not a dictionary");
    info_dict info;
    const auto* pieces = v.find("pieces");
    if (!pieces) throw error(errc::missing_field, "info dictionary lacks 'pieces'");
    if (!pieces->is_string()) throw error(errc::malformed_input, "'pieces' is not a string");
    if (pieces->as_string().size() % 20 != 0)
        throw error(errc::bad_pieces, "pieces length " + std::to_string(pieces->as_string().size()) +
                                          " is not a multiple of 20");
    info.pieces = pieces->as_string();

    const auto* name = v.find("name");
    if (!name || !name->is_string()) throw error(errc::missing_field, "info dictionary lacks 'name'");
    info.name = name->as_string();
    info.piece_length = require_int(v, "piece length");
    if (info.piece_length <= 0) throw error(errc::malformed_input, "piece length must be positive");

    if (const auto* files = v.find("files")) {
        if (!files->is_list()) throw error(errc::malformed_input, "'files' is not a list");
        for (const auto& f : files->as_list()) {
            file_entry e;
            e.length = require_int(f, "length");
            if (e.length < 0) throw error(errc::malformed_input, "negative file length");
            const auto* path = f.find("path");
            if (!path || !path->is_list() || path->as_list().empty())
                throw error(errc::missing_field, "file entry lacks 'path'");
            for (const auto& c : path->as_list()) {
                if (!c.is_string()) throw error(errc::malformed_input, "path component is not a string");
                e.path.push_back(c.as_string());
            }
            info.files.push_back(std::move(e));
        }
    } else {
        info.length = require_int(v, "length");
        if (*info.length < 0) throw error(errc::malformed_input, "negative length");
    }

    std::int64_t total = info.total_length();
    std::int64_t expected = (total + info.piece_length - 1) / info.piece_length;
    if (static_cast<std::int64_t>(info.piece_count()) != expected)
        throw error(errc::bad_pieces, "piece count " + std::to_string(info.piece_count()) +
                                          " does not match content length (expected " +
                                          std::to_string(expected) + ")");

    for (const auto& [k, val] : v.as_dict()) {
        if (k != "name" && k != "piece length" && k != "pieces" && k != "files" && k != "length")
            info.extra.emplace(k, val);
    }
    return info;
}

bencode::decode_result lenient_decode(bytes_view input)
{
    bencode::decode_options opts;
    opts.lenient = true;
    try {
        return bencode::decode(input, opts);
    } catch (const bencode::error& e) {
        throw error(errc::malformed_input, e.what());
    }
}

}  // namespace

info_dict parse_info(bytes_view info_bytes)
{
    return info_from_value(lenient_decode(info_bytes).root);
}

torrent_meta parse_torrent(bytes_view input)
{
    if (input.empty()) throw error(errc::malformed_input, "empty torrent");
    auto decoded = lenient_decode(input);
    const auto& root = decoded.root;
    if (!root.is_dict()) throw error(errc::malformed_input, "torrent is not a dictionary");

    auto span = bencode::dict_value_span(input, "info");
    if (!span) throw error(errc::missing_field, "torrent lacks 'info'");

    torrent_meta meta;
    meta.info = info_from_value(*root.find("info"));
    meta.info_bytes = bytes(input.substr(span->first, span->second - span->first));
    meta.hash = infohash::from_bytes(sha1_bytes(meta.info_bytes));
    meta.violations = std::move(decoded.violations);

    if (const auto* al = root.find("announce-list"); al && al->is_list()) {
        for (const auto& tier : al->as_list()) {
            if (!tier.is_list()) continue;
            for (const auto& url : tier.as_list())
                if (url.is_string() && std::find(meta.trackers.begin(), meta.trackers.end(), url.as_string()) ==
                                           meta.trackers.end())
                    meta.trackers.push_back(url.as_string());
        }
    } else if (const auto* a = root.find("announce"); a && a->is_string()) {
        meta.trackers.push_back(a->as_string());
    }
    if (const auto* cd = root.find("creation date"); cd && cd->is_int()) meta.creation_date = cd->as_int();

    for (const auto& [k, val] : root.as_dict()) {
        if (k != "info" && k != "announce" && k != "announce-list" && k != "creation date")
            meta.extra.emplace(k, val);
    }
    return meta;
}

bytes encode_torrent(const torrent_meta& meta)
{
    // Splice the stored info bytes so third-party torrents keep their hash.
    bencode::dict top = meta.extra;
    if (!meta.trackers.empty()) {
        top["announce"] = bencode::value(meta.trackers.front());
        if (meta.trackers.size() > 1) {
            bencode::list tiers;
            for (const auto& t : meta.trackers) tiers.emplace_back(bencode::list{bencode::value(t)});
            top["announce-list"] = bencode::value(std::move(tiers));
        }
    }
    if (meta.creation_date) top["creation date"] = bencode::value(*meta.creation_date);

    bytes info = meta.info_bytes.empty() ? bencode::encode(meta.info.to_bencode()) : meta.info_bytes;
    bytes out = "d";
    bool info_written = false;
    auto write_info = [&] {
        out += "4:info";
        out += info;
        info_written = true;
    };
    for (const auto& [k, v] : top) {
        if (!info_written && bytes("info") < k) write_info();
        out += std::to_string(k.size()) + ":" + k;
        out += bencode::encode(v);
    }
    if (!info_written) write_info();
    out += "e";
    return out;
}

namespace {

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

std::vector<std::string> split_path(const std::string& p)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        auto slash = p.find('/', start);
        out.push_back(p.substr(start, slash == std::string::npos ? std::string::npos : slash - start));
        if (slash == std::string::npos) break;
        start = slash + 1;
    }
    return out;
}

}  // namespace

bytes concatenate(const info_dict& info, const std::map<std::string, bytes>& files)
{
    bytes all;
    all.reserve(static_cast<std::size_t>(info.total_length()));
    for (const auto& f : info.file_list()) {
        auto it = files.find(info.single_file() ? files.begin()->first : f.joined());
        if (it != files.end()) all += it->second;
    }
    return all;
}

torrent_meta build_torrent(const std::map<std::string, bytes>& files, std::int64_t piece_length,
                           std::vector<std::string> trackers, std::optional<std::string> name)
{
    if (files.empty()) throw error(errc::empty_input, "no files to build a torrent from");
    if (!is_power_of_two(piece_length) || piece_length < min_piece_length || piece_length > max_piece_length)
        throw error(errc::bad_piece_length, "piece length " + std::to_string(piece_length) +
                                                " is not a power of two in [16 KiB, 4 MiB]");

    info_dict info;
    info.piece_length = piece_length;
    const auto& first = files.begin()->first;
    bool single = files.size() == 1 && first.find('/') == std::string::npos && (!name || *name == first);
    if (single) {
        info.name = first;
        info.length = static_cast<std::int64_t>(files.begin()->second.size());
    } else {
        info.name = name.value_or("site");
        for (const auto& [path, content] : files)
            info.files.push_back(file_entry{split_path(path), static_cast<std::int64_t>(content.size())});
    }

    bytes all = concatenate(info, files);
    for (std::size_t off = 0; off < all.size(); off += static_cast<std::size_t>(piece_length))
        info.pieces += sha1_bytes(bytes_view(all).substr(off, static_cast<std::size_t>(piece_length)));

    torrent_meta meta;
    meta.info = std::move(info);
    meta.trackers = std::move(trackers);
    meta.info_bytes = bencode::encode(meta.info.to_bencode());
    meta.hash = infohash::from_bytes(sha1_bytes(meta.info_bytes));
    return meta;
}

std::string magnet::to_uri() const
{
    std::string uri = "magnet:?xt=urn:btih:" + hash.hex();
    if (display_name) uri += "&dn=" + percent_encode(*display_name);
    for (const auto& t : trackers) uri += "&tr=" + percent_encode(t);
    return uri;
}

magnet parse_magnet(std::string_view uri)
{
    constexpr std::string_view prefix = "magnet:?";
    if (uri.substr(0, prefix.size()) != prefix) throw error(errc::not_magnet, "URI does not start with magnet:?");

    magnet out;
    bool have_xt = false;
    std::string_view query = uri.substr(prefix.size());
    while (!query.empty()) {
        auto amp = query.find('&');
        std::string_view param = query.substr(0, amp);
        query = amp == std::string_view::npos ? std::string_view{} : query.substr(amp + 1);
        auto eq = param.find('=');
        if (eq == std::string_view::npos) continue;
        std::string_view key = param.substr(0, eq);
        std::string val = percent_decode(param.substr(eq + 1));

        if (key == "xt") {
            constexpr std::string_view urn = "urn:btih:";
            if (have_xt || val.compare(0, urn.size(), urn) != 0) continue;
            std::string_view encoded = std::string_view(val).substr(urn.size());
            std::optional<bytes> raw;
            if (encoded.size() == 40) raw = from_hex(encoded);
            else if (encoded.size() == 32) raw = from_base32(encoded);
            if (!raw || raw->size() != 20)
                throw error(errc::bad_infohash, "btih value '" + std::string(encoded) + "' is not 40 hex or 32 base32");
            out.hash = infohash::from_bytes(*raw);
            have_xt = true;
        } else if (key == "dn") {
            out.display_name = val;
        } else if (key == "tr") {
            out.trackers.push_back(val);
        }
    }
    if (!have_xt) throw error(errc::missing_xt, "magnet URI has no urn:btih exact topic");
    return out;
}

}  // namespace mael::torrent
