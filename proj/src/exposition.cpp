// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/exposition.hpp"

#include <charconv>
#include <cmath>
#include <optional>
#include <set>
#include <unordered_set>

namespace ew::exposition {

DecodeError::DecodeError(Code code, std::size_t line, const std::string& reason)
    : std::runtime_error(line == 0 ? std::string(to_string(code)) + ": " + reason
                                   : std::string(to_string(code)) + " at line " + std::to_string(line) +
                                         ": " + reason),
      code_(code),
      line_(line) {}

std::string_view to_string(DecodeError::Code code) noexcept {
    switch (code) {
        case DecodeError::Code::MissingEof: return "MissingEof";
        case DecodeError::Code::SyntaxError: return "SyntaxError";
        case DecodeError::Code::TypeLineMismatch: return "TypeLineMismatch";
        case DecodeError::Code::DuplicateSeries: return "DuplicateSeries";
    }
    return "Unknown";
}

std::string format_value(double v) {
    if (std::isnan(v)) {
        return "NaN";
    }
    if (std::isinf(v)) {
        return v > 0 ? "+Inf" : "-Inf";
    }
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string escape_help(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c == '\n') {
            out += "\\n";
        } else {
            out += c;
        }
    }
    return out;
}

std::string escape_label_value(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (c == '\\') {
            out += "\\\\";
        } else if (c == '\n') {
            out += "\\n";
        } else if (c == '"') {
            out += "\\\"";
        } else {
            out += c;
        }
    }
    return out;
}

namespace {

void encode_family(std::string& out, const MetricFamily& family) {
    out += "# HELP ";
    out += family.name;
    out += ' ';
    out += escape_help(family.help);
    out += "\n# TYPE ";
    out += family.name;
    out += ' ';
    out += to_string(family.kind);
    out += '\n';

    const std::string name = sample_name(family);
    for (const auto& series : family.series) {
        out += name;
        if (!series.labels.empty()) {
            out += '{';
            bool first = true;
            for (const auto& [k, v] : series.labels) {
                if (!first) {
                    out += ',';
                }
                first = false;
                out += k;
                out += "=\"";
                out += escape_label_value(v);
                out += '"';
            }
            out += '}';
        }
        out += ' ';
        out += format_value(series.sample.value);
        if (series.sample.has_timestamp()) {
            out += ' ';
            out += std::to_string(series.sample.timestamp_ms);
        }
        out += '\n';
    }
}

}  // namespace

std::string encode(const std::vector<MetricFamily>& families) {
    std::string out;
    for (const auto& family : families) {
        encode_family(out, family);
    }
    out += "# EOF\n";
    return out;
}

std::string encode(const Document& doc) {
    return encode(doc.families);
}

namespace {

using Code = DecodeError::Code;

class LineParser {
public:
    LineParser(std::string_view line, std::size_t line_no) : s_(line), line_no_(line_no) {}

    [[noreturn]] void fail(const std::string& reason) const {
        throw DecodeError(Code::SyntaxError, line_no_, reason);
    }

    bool at_end() const noexcept { return pos_ >= s_.size(); }
    char peek() const noexcept { return at_end() ? '\0' : s_[pos_]; }

    void expect(char c) {
        if (peek() != c) {
            fail(std::string("expected '") + c + "'");
        }
        ++pos_;
    }

    std::string_view identifier() {
        std::size_t start = pos_;
        while (!at_end() && s_[pos_] != ' ' && s_[pos_] != '{' && s_[pos_] != '=' && s_[pos_] != ',' &&
               s_[pos_] != '}') {
            ++pos_;
        }
        auto id = s_.substr(start, pos_ - start);
        if (!is_identifier(id)) {
            fail("invalid identifier '" + std::string(id) + "'");
        }
        return id;
    }

    std::string quoted_label_value() {
        expect('"');
        std::string out;
        while (true) {
            if (at_end()) {
                fail("unterminated label value");
            }
            char c = s_[pos_++];
            if (c == '"') {
                return out;
            }
            if (c == '\\') {
                if (at_end()) {
                    fail("dangling escape");
                }
                char e = s_[pos_++];
                if (e == '\\') {
                    out += '\\';
                } else if (e == '"') {
                    out += '"';
                } else if (e == 'n') {
                    out += '\n';
                } else {
                    fail(std::string("invalid escape '\\") + e + "'");
                }
            } else {
                out += c;
            }
        }
    }

    std::string_view token() {
        std::size_t start = pos_;
        while (!at_end() && s_[pos_] != ' ') {
            ++pos_;
        }
        return s_.substr(start, pos_ - start);
    }

    std::string_view rest() {
        auto r = s_.substr(pos_);
        pos_ = s_.size();
        return r;
    }

    std::size_t line_no() const noexcept { return line_no_; }

private:
    std::string_view s_;
    std::size_t pos_ = 0;
    std::size_t line_no_;
};

std::optional<double> parse_value(std::string_view tok) {
    if (tok == "+Inf" || tok == "Inf") {
        return std::numeric_limits<double>::infinity();
    }
    if (tok == "-Inf") {
        return -std::numeric_limits<double>::infinity();
    }
    if (tok == "NaN") {
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (tok.empty()) {
        return std::nullopt;
    }
    // from_chars also accepts "inf"/"nan" spellings; only the canonical literals above are valid.
    for (char c : tok) {
        if (!((c >= '0' && c <= '9') || c == '.' || c == 'e' || c == 'E' || c == '-' || c == '+')) {
            return std::nullopt;
        }
    }
    std::string_view body = tok;
    if (body.front() == '+') {
        body.remove_prefix(1);
    }
    double v = 0.0;
    auto res = std::from_chars(body.data(), body.data() + body.size(), v);
    if (res.ec != std::errc() || res.ptr != body.data() + body.size()) {
        return std::nullopt;
    }
    return v;
}

std::string unescape_help(std::string_view s, const LineParser& p) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] != '\\') {
            out += s[i];
            continue;
        }
        if (i + 1 >= s.size()) {
            p.fail("dangling escape in help");
        }
        char e = s[++i];
        if (e == '\\') {
            out += '\\';
        } else if (e == 'n') {
            out += '\n';
        } else if (e == '"') {
            out += '"';
        } else {
            p.fail(std::string("invalid escape '\\") + e + "' in help");
        }
    }
    return out;
}

struct OpenFamily {
    MetricFamily family;
    bool has_help = false;
    bool has_type = false;
    std::set<LabelSet> seen;
};

class DocumentBuilder {
public:
    void metadata(LineParser& p, bool is_help) {
        auto name = p.identifier();
        if (!current_ || current_->family.name != name || !current_->family.series.empty() ||
            (is_help ? current_->has_help : current_->has_type)) {
            open(std::string(name), p);
        }
        if (is_help) {
            std::string help;
            if (!p.at_end()) {
                p.expect(' ');
                help = unescape_help(p.rest(), p);
            }
            current_->family.help = std::move(help);
            current_->has_help = true;
        } else {
            p.expect(' ');
            auto kind = p.rest();
            if (kind == "counter") {
                current_->family.kind = MetricKind::counter;
            } else if (kind == "gauge") {
                current_->family.kind = MetricKind::gauge;
            } else {
                p.fail("unsupported metric type '" + std::string(kind) + "'");
            }
            current_->has_type = true;
        }
    }

    void sample(LineParser& p) {
        auto name = p.identifier();
        if (!current_ || !current_->has_type) {
            p.fail("sample '" + std::string(name) + "' without a preceding TYPE line");
        }
        auto& fam = current_->family;
        if (name != sample_name(fam)) {
            bool sibling = (fam.kind == MetricKind::counter && name == fam.name) ||
                           (fam.kind == MetricKind::gauge && name == fam.name + "_total");
            if (sibling) {
                throw DecodeError(Code::TypeLineMismatch, p.line_no(),
                                  "sample '" + std::string(name) + "' does not match " +
                                      std::string(to_string(fam.kind)) + " family '" + fam.name + "'");
            }
            p.fail("sample '" + std::string(name) + "' outside its family");
        }

        std::vector<LabelPair> pairs;
        if (p.peek() == '{') {
            p.expect('{');
            if (p.peek() != '}') {
                while (true) {
                    auto label = std::string(p.identifier());
                    p.expect('=');
                    pairs.emplace_back(std::move(label), p.quoted_label_value());
                    if (p.peek() == ',') {
                        p.expect(',');
                        continue;
                    }
                    break;
                }
            }
            p.expect('}');
        }
        LabelSet labels;
        try {
            labels = canonicalize_labels(std::move(pairs));
        } catch (const ModelError& e) {
            p.fail(e.what());
        }

        p.expect(' ');
        auto value = parse_value(p.token());
        if (!value) {
            p.fail("invalid sample value");
        }
        Sample sample{Sample::kNoTimestamp, *value};
        if (!p.at_end()) {
            p.expect(' ');
            auto tok = p.token();
            std::int64_t ts = 0;
            auto res = std::from_chars(tok.data(), tok.data() + tok.size(), ts);
            if (tok.empty() || res.ec != std::errc() || res.ptr != tok.data() + tok.size() || ts < 0) {
                p.fail("invalid timestamp '" + std::string(tok) + "'");
            }
            sample.timestamp_ms = ts;
            if (!p.at_end()) {
                p.fail("trailing characters after timestamp");
            }
        }
        if (fam.kind == MetricKind::counter && (std::isnan(sample.value) || std::isinf(sample.value) ||
                                                sample.value < 0)) {
            throw DecodeError(Code::TypeLineMismatch, p.line_no(), "counter value must be finite and >= 0");
        }
        if (!current_->seen.insert(labels).second) {
            throw DecodeError(Code::DuplicateSeries, p.line_no(),
                              "duplicate series " + fam.name + to_string(labels));
        }
        fam.series.push_back(Series{std::move(labels), sample});
    }

    Document finish(const LineParser& p) {
        close(p);
        Document doc;
        doc.families = std::move(families_);
        doc.terminated = true;
        return doc;
    }

private:
    void open(std::string name, const LineParser& p) {
        close(p);
        if (!names_.insert(name).second) {
            p.fail("duplicate family '" + name + "'");
        }
        current_.emplace();
        current_->family.name = std::move(name);
    }

    void close(const LineParser& p) {
        if (!current_) {
            return;
        }
        if (!current_->has_type) {
            p.fail("family '" + current_->family.name + "' has no TYPE line");
        }
        families_.push_back(std::move(current_->family));
        current_.reset();
    }

    std::optional<OpenFamily> current_;
    std::vector<MetricFamily> families_;
    std::unordered_set<std::string> names_;
};

}  // namespace

Document decode(std::string_view text) {
    DocumentBuilder builder;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        ++line_no;
        std::size_t nl = text.find('\n', pos);
        std::string_view line = nl == std::string_view::npos ? text.substr(pos) : text.substr(pos, nl - pos);
        std::size_t next = nl == std::string_view::npos ? text.size() : nl + 1;
        LineParser p(line, line_no);

        if (line == "# EOF") {
            if (next != text.size()) {
                p.fail("content after # EOF");
            }
            return builder.finish(p);
        }
        if (line.empty()) {
            p.fail("empty line");
        }
        if (line.starts_with("# HELP ")) {
            LineParser meta(line.substr(7), line_no);
            builder.metadata(meta, true);
        } else if (line.starts_with("# TYPE ")) {
            LineParser meta(line.substr(7), line_no);
            builder.metadata(meta, false);
        } else if (line.front() == '#') {
            p.fail("unsupported comment line");
        } else {
            builder.sample(p);
        }
        pos = next;
    }
    throw DecodeError(Code::MissingEof, 0, "document is not terminated by '# EOF'");
}

}  // namespace ew::exposition
