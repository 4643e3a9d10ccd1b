#include "moflow/chemio.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include "moflow/errors.hpp"

namespace moflow::chem {

namespace {

bool is_organic_subset(const std::string& e) {
    static const std::set<std::string> organic = {"B", "C", "N", "O", "P",
                                                  "S", "F", "Cl", "Br", "I"};
    return organic.count(e) > 0;
}

bool is_aromatic_lower(char c) {
    return c == 'b' || c == 'c' || c == 'n' || c == 'o' || c == 'p' || c == 's';
}

}  // namespace

std::vector<SmilesToken> tokenize_smiles(const std::string& s) {
    std::vector<SmilesToken> out;
    std::size_t i = 0;
    while (i < s.size()) {
        char ch = s[i];
        SmilesToken tok;
        tok.offset = i;
        if (ch == 'C' && i + 1 < s.size() && s[i + 1] == 'l') {
            tok.kind = SmilesToken::Kind::Atom;
            tok.symbol = "Cl";
            i += 2;
        } else if (ch == 'B' && i + 1 < s.size() && s[i + 1] == 'r') {
            tok.kind = SmilesToken::Kind::Atom;
            tok.symbol = "Br";
            i += 2;
        } else if (ch == 'B' || ch == 'C' || ch == 'N' || ch == 'O' || ch == 'P' ||
                   ch == 'S' || ch == 'F' || ch == 'I') {
            tok.kind = SmilesToken::Kind::Atom;
            tok.symbol = std::string(1, ch);
            ++i;
        } else if (is_aromatic_lower(ch)) {
            throw ParseError("aromatic SMILES is unsupported (kekulized input required)", i);
        } else if (ch == '[') {
            tok.kind = SmilesToken::Kind::BracketAtom;
            ++i;
            if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
                throw ParseError("isotope specifications are unsupported", i);
            }
            if (i >= s.size() || !std::isupper(static_cast<unsigned char>(s[i]))) {
                throw ParseError("expected element symbol in bracket atom", i);
            }
            tok.symbol = std::string(1, s[i]);
            ++i;
            if (i < s.size() && std::islower(static_cast<unsigned char>(s[i]))) {
                tok.symbol += s[i];
                ++i;
            }
            if (i < s.size() && s[i] == '@') {
                throw ParseError("stereo descriptors are unsupported", i);
            }
            if (i < s.size() && s[i] == 'H') {
                ++i;  // hydrogen-suppressed model; H counts are ignored
                if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
            }
            if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
                tok.charge = (s[i] == '+') ? 1 : -1;
                ++i;
                if (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) ||
                                     s[i] == '+' || s[i] == '-')) {
                    throw ParseError("charges outside {-1,0,+1} are unsupported", i);
                }
            }
            if (i >= s.size() || s[i] != ']') {
                throw ParseError("unterminated bracket atom", tok.offset);
            }
            ++i;
        } else if (ch == '-' || ch == '=' || ch == '#') {
            tok.kind = SmilesToken::Kind::Bond;
            tok.order = (ch == '-') ? 1 : (ch == '=' ? 2 : 3);
            ++i;
        } else if (ch == '(') {
            tok.kind = SmilesToken::Kind::BranchOpen;
            ++i;
        } else if (ch == ')') {
            tok.kind = SmilesToken::Kind::BranchClose;
            ++i;
        } else if (ch >= '1' && ch <= '9') {
            tok.kind = SmilesToken::Kind::RingClosure;
            tok.ring_id = ch - '0';
            ++i;
        } else if (ch == '/' || ch == '\\' || ch == '@') {
            throw ParseError("stereo descriptors are unsupported", i);
        } else if (ch == '.') {
            throw ParseError("multi-fragment '.' notation is unsupported", i);
        } else if (ch == '%') {
            throw ParseError("two-digit ring closures are unsupported", i);
        } else {
            throw ParseError(std::string("unexpected character '") + ch + "'", i);
        }
        out.push_back(std::move(tok));
    }
    return out;
}

Molecule parse_smiles(const std::string& s) {
    std::string trimmed = s;
    while (!trimmed.empty() && (trimmed.back() == '\n' || trimmed.back() == '\r' ||
                                trimmed.back() == ' ' || trimmed.back() == '\t')) {
        trimmed.pop_back();
    }
    auto tokens = tokenize_smiles(trimmed);
    Molecule m;
    std::vector<std::size_t> branch_stack;
    std::size_t prev = static_cast<std::size_t>(-1);
    int pending_order = 0;  // 0 = no explicit bond symbol
    std::size_t pending_offset = 0;
    struct OpenRing {
        std::size_t atom;
        int order;
        std::size_t offset;
    };
    std::map<int, OpenRing> rings;

    for (const SmilesToken& tok : tokens) {
        switch (tok.kind) {
            case SmilesToken::Kind::Atom:
            case SmilesToken::Kind::BracketAtom: {
                if (tok.kind == SmilesToken::Kind::Atom && !is_organic_subset(tok.symbol)) {
                    throw ParseError("element '" + tok.symbol + "' needs bracket notation",
                                     tok.offset);
                }
                m.add_atom(tok.symbol, tok.charge);
                std::size_t cur = m.atoms.size() - 1;
                if (prev != static_cast<std::size_t>(-1)) {
                    m.add_bond(prev, cur, pending_order == 0 ? 1 : pending_order);
                } else if (pending_order != 0) {
                    throw ParseError("bond symbol before any atom", pending_offset);
                }
                pending_order = 0;
                prev = cur;
                break;
            }
            case SmilesToken::Kind::Bond:
                if (pending_order != 0) throw ParseError("duplicate bond symbol", tok.offset);
                pending_order = tok.order;
                pending_offset = tok.offset;
                break;
            case SmilesToken::Kind::BranchOpen:
                if (prev == static_cast<std::size_t>(-1)) {
                    throw ParseError("branch before any atom", tok.offset);
                }
                if (pending_order != 0) throw ParseError("bond symbol before '('", tok.offset);
                branch_stack.push_back(prev);
                break;
            case SmilesToken::Kind::BranchClose:
                if (branch_stack.empty()) throw ParseError("unmatched ')'", tok.offset);
                if (pending_order != 0) throw ParseError("dangling bond symbol", tok.offset);
                prev = branch_stack.back();
                branch_stack.pop_back();
                break;
            case SmilesToken::Kind::RingClosure: {
                if (prev == static_cast<std::size_t>(-1)) {
                    throw ParseError("ring closure before any atom", tok.offset);
                }
                auto it = rings.find(tok.ring_id);
                if (it == rings.end()) {
                    rings[tok.ring_id] = OpenRing{prev, pending_order, tok.offset};
                } else {
                    int order = it->second.order;
                    if (order != 0 && pending_order != 0 && order != pending_order) {
                        throw ParseError("conflicting ring-closure bond orders", tok.offset);
                    }
                    if (order == 0) order = pending_order;
                    if (order == 0) order = 1;
                    m.add_bond(it->second.atom, prev, order);
                    rings.erase(it);
                }
                pending_order = 0;
                break;
            }
        }
    }
    if (!branch_stack.empty()) throw ParseError("unmatched '('", trimmed.size());
    if (pending_order != 0) throw ParseError("dangling bond symbol", pending_offset);
    if (!rings.empty()) {
        throw ParseError("unmatched ring closure " + std::to_string(rings.begin()->first),
                         rings.begin()->second.offset);
    }
    return m;
}

namespace {

std::vector<std::vector<std::size_t>> components(const Molecule& m) {
    std::vector<int> comp(m.atoms.size(), -1);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t seed = 0; seed < m.atoms.size(); ++seed) {
        if (comp[seed] >= 0) continue;
        std::vector<std::size_t> stack{seed}, members;
        comp[seed] = static_cast<int>(out.size());
        while (!stack.empty()) {
            std::size_t a = stack.back();
            stack.pop_back();
            members.push_back(a);
            for (std::size_t nb : m.neighbors(a)) {
                if (comp[nb] < 0) {
                    comp[nb] = comp[seed];
                    stack.push_back(nb);
                }
            }
        }
        std::sort(members.begin(), members.end());
        out.push_back(std::move(members));
    }
    return out;
}

std::string atom_token(const Atom& a) {
    if (a.charge == 0 && is_organic_subset(a.element)) return a.element;
    std::string s = "[" + a.element;
    if (a.charge > 0) s += "+";
    if (a.charge < 0) s += "-";
    return s + "]";
}

std::string bond_token(int order) {
    if (order == 2) return "=";
    if (order == 3) return "#";
    return "";
}

// DFS writer with explicit closure-digit bookkeeping done in two passes:
// pass 1 classifies ring (back) edges, pass 2 emits text.
struct SmilesWriter2 {
    const Molecule& m;
    std::vector<bool> visited;
    std::set<std::pair<std::size_t, std::size_t>> ring_edges;

    explicit SmilesWriter2(const Molecule& mol) : m(mol), visited(mol.atoms.size(), false) {}

    void classify(std::size_t at, std::size_t from) {
        visited[at] = true;
        for (std::size_t nb : m.neighbors(at)) {
            if (nb == from) continue;
            if (visited[nb]) {
                auto key = std::minmax(at, nb);
                ring_edges.insert({key.first, key.second});
            } else {
                classify(nb, at);
            }
        }
    }

    std::map<std::pair<std::size_t, std::size_t>, int> digits;
    std::vector<bool> digit_used = std::vector<bool>(10, false);

    std::string ring_marks(std::size_t at) {
        std::string s;
        for (std::size_t nb : m.neighbors(at)) {
            auto key = std::minmax(at, nb);
            std::pair<std::size_t, std::size_t> e{key.first, key.second};
            if (!ring_edges.count(e)) continue;
            auto it = digits.find(e);
            if (it == digits.end()) {
                int d = 0;
                for (int cand = 1; cand <= 9; ++cand) {
                    if (!digit_used[cand]) {
                        d = cand;
                        break;
                    }
                }
                if (d == 0) throw ParseError("more than 9 simultaneously open rings", 0);
                digit_used[d] = true;
                digits[e] = d;
                s += bond_token(*m.bond_order(at, nb)) + std::to_string(d);
            } else {
                digit_used[it->second] = false;  // closed, digit reusable
                s += bond_token(*m.bond_order(at, nb)) + std::to_string(it->second);
                digits.erase(it);
            }
        }
        return s;
    }

    std::string emit(std::size_t at, std::size_t from) {
        visited[at] = true;
        std::string s = atom_token(m.atoms[at]) + ring_marks(at);
        std::vector<std::pair<std::size_t, int>> children;
        for (std::size_t nb : m.neighbors(at)) {
            if (nb == from) continue;
            auto key = std::minmax(at, nb);
            if (ring_edges.count({key.first, key.second})) continue;
            if (!visited[nb]) children.emplace_back(nb, *m.bond_order(at, nb));
        }
        for (std::size_t idx = 0; idx < children.size(); ++idx) {
            auto [nb, order] = children[idx];
            std::string sub = bond_token(order) + emit(nb, at);
            if (idx + 1 < children.size()) {
                s += "(" + sub + ")";
            } else {
                s += sub;
            }
        }
        return s;
    }
};

}  // namespace

std::string write_smiles(const Molecule& m) {
    if (m.empty()) throw DimensionError("write_smiles: empty molecule");
    if (components(m).size() != 1) {
        throw DimensionError("write_smiles: molecule is disconnected");
    }
    SmilesWriter2 w(m);
    w.classify(0, static_cast<std::size_t>(-1));
    std::fill(w.visited.begin(), w.visited.end(), false);
    return w.emit(0, static_cast<std::size_t>(-1));
}

// ------------------------------------------------------------ canonical key

namespace {

using Coloring = std::vector<std::size_t>;

Coloring initial_coloring(const Molecule& m) {
    std::vector<std::pair<std::string, int>> labels;
    for (const Atom& a : m.atoms) labels.emplace_back(a.element, a.charge);
    auto sorted = labels;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    Coloring c(m.atoms.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        c[i] = static_cast<std::size_t>(
            std::lower_bound(sorted.begin(), sorted.end(), labels[i]) - sorted.begin());
    }
    return c;
}

Coloring refine(const Molecule& m, Coloring c) {
    const std::size_t n = m.atoms.size();
    while (true) {
        std::vector<std::pair<std::vector<std::size_t>, std::size_t>> sig(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> nb_sig;
            for (const Bond& b : m.bonds) {
                if (b.i == i) nb_sig.push_back(c[b.j] * 4 + static_cast<std::size_t>(b.order));
                if (b.j == i) nb_sig.push_back(c[b.i] * 4 + static_cast<std::size_t>(b.order));
            }
            std::sort(nb_sig.begin(), nb_sig.end());
            nb_sig.insert(nb_sig.begin(), c[i]);
            sig[i] = {std::move(nb_sig), i};
        }
        auto sorted = sig;
        std::sort(sorted.begin(), sorted.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        Coloring next(n);
        std::size_t color = 0;
        for (std::size_t r = 0; r < n; ++r) {
            if (r > 0 && sorted[r].first != sorted[r - 1].first) ++color;
            next[sorted[r].second] = color;
        }
        std::size_t old_count = *std::max_element(c.begin(), c.end()) + 1;
        std::size_t new_count = color + 1;
        if (new_count == old_count) return next;
        c = std::move(next);
    }
}

std::string serialize_with(const Molecule& m, const Coloring& c) {
    const std::size_t n = m.atoms.size();
    // rank = color (discrete coloring assumed)
    std::vector<std::size_t> by_rank(n);
    for (std::size_t i = 0; i < n; ++i) by_rank[c[i]] = i;
    std::string s;
    for (std::size_t r = 0; r < n; ++r) {
        const Atom& a = m.atoms[by_rank[r]];
        s += a.element + "," + std::to_string(a.charge) + ";";
    }
    std::vector<Bond> relabeled;
    for (const Bond& b : m.bonds) {
        std::size_t i = c[b.i], j = c[b.j];
        if (i > j) std::swap(i, j);
        relabeled.push_back(Bond{i, j, b.order});
    }
    std::sort(relabeled.begin(), relabeled.end());
    s += "|";
    for (const Bond& b : relabeled) {
        s += std::to_string(b.i) + "-" + std::to_string(b.j) + ":" + std::to_string(b.order) +
             ";";
    }
    return s;
}

std::string canon_search(const Molecule& m, const Coloring& c) {
    const std::size_t n = m.atoms.size();
    std::vector<std::size_t> count(n, 0);
    for (std::size_t x : c) ++count[x];
    std::size_t target = n;
    for (std::size_t col = 0; col < n; ++col) {
        if (count[col] > 1) {
            target = col;
            break;
        }
    }
    if (target == n) return serialize_with(m, c);
    std::string best;
    for (std::size_t v = 0; v < n; ++v) {
        if (c[v] != target) continue;
        Coloring ind = c;
        // individualize: shift colors above target up, give v its own cell
        for (std::size_t i = 0; i < n; ++i) {
            if (ind[i] > target || (ind[i] == target && i != v)) ++ind[i];
        }
        std::string cand = canon_search(m, refine(m, ind));
        if (best.empty() || cand < best) best = std::move(cand);
    }
    return best;
}

}  // namespace

std::string canonical_key(const Molecule& m) {
    if (m.empty()) return "empty";
    return canon_search(m, refine(m, initial_coloring(m)));
}

std::vector<Molecule> load_smiles_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    std::vector<Molecule> out;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        out.push_back(parse_smiles(line));
    }
    return out;
}

void save_smiles_file(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write file: " + path);
    for (const auto& l : lines) out << l << "\n";
}

}  // namespace moflow::chem
