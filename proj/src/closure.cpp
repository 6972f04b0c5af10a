#include "kodsim/closure.hpp"

#include <array>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "kodsim/rng.hpp"

namespace kodsim {

int generator_count(RelationKind rel) {
    switch (rel) {
    case RelationKind::Abelian: return 1;
    case RelationKind::Weyl: return 2;
    case RelationKind::Su2: return 3;
    }
    return 0;
}

std::string generator_name(RelationKind rel, int g) {
    static const char* weyl[] = {"q", "p"};
    static const char* su2[] = {"jx", "jy", "jz"};
    switch (rel) {
    case RelationKind::Abelian: return "x";
    case RelationKind::Weyl: return weyl[g];
    case RelationKind::Su2: return su2[g];
    }
    return "?";
}

namespace {

inline int exp_of(uint32_t key, int g) { return (key >> (8 * g)) & 0xff; }
inline uint32_t with_exp(uint32_t key, int g, int e) {
    return (key & ~(0xffu << (8 * g))) | (static_cast<uint32_t>(e) << (8 * g));
}
inline int total_degree(uint32_t key, int ngen) {
    int d = 0;
    for (int g = 0; g < ngen; ++g) d += exp_of(key, g);
    return d;
}

using TermMap = std::map<uint32_t, cxd>;

// su2 single commutators [g_h, g_g] = coeff * g_t for h > g
struct GenBracket {
    cxd coeff;
    int gen;     // -1 means the unit monomial (Weyl central term)
};

GenBracket gen_bracket(RelationKind rel, int h, int g) {
    if (rel == RelationKind::Weyl) return {cxd(0.0, -1.0), -1};        // [p,q] = -i 1
    if (h == 1 && g == 0) return {cxd(0.0, -1.0), 2};                  // [jy,jx] = -i jz
    if (h == 2 && g == 0) return {cxd(0.0, +1.0), 1};                  // [jz,jx] = +i jy
    if (h == 2 && g == 1) return {cxd(0.0, -1.0), 0};                  // [jz,jy] = -i jx
    throw std::logic_error("gen_bracket: bad pair");
}

// normal-ordered product (monomial key) * (single generator g), memoized
const TermMap& mono_times_gen(RelationKind rel, uint32_t key, int g) {
    thread_local std::unordered_map<uint64_t, TermMap> cache[3];
    auto& c = cache[static_cast<int>(rel)];
    const uint64_t ck = (static_cast<uint64_t>(key) << 2) | static_cast<uint64_t>(g);
    auto it = c.find(ck);
    if (it != c.end()) return it->second;

    const int ngen = generator_count(rel);
    int h = -1;
    for (int i = ngen - 1; i >= 0; --i)
        if (exp_of(key, i) > 0) {
            h = i;
            break;
        }

    TermMap out;
    if (h <= g) {
        const int e = exp_of(key, g);
        if (e + 1 > 0xff || total_degree(key, ngen) + 1 > SymbolicElement::kMaxDegree)
            throw DegreeOverflowError("pbw: monomial degree above cap");
        out[with_exp(key, g, e + 1)] = 1.0;
    } else {
        const uint32_t rest = with_exp(key, h, exp_of(key, h) - 1);
        // rest * g, then re-append h; copy before iterating, nested calls
        // may rehash the cache
        const TermMap t1 = mono_times_gen(rel, rest, g);
        for (const auto& [mk, mc] : t1)
            for (const auto& [nk, nc] : mono_times_gen(rel, mk, h)) out[nk] += mc * nc;
        // rest * [h, g]
        const GenBracket br = gen_bracket(rel, h, g);
        if (br.gen < 0) {
            out[rest] += br.coeff;
        } else {
            for (const auto& [nk, nc] : mono_times_gen(rel, rest, br.gen))
                out[nk] += br.coeff * nc;
        }
    }
    return c.emplace(ck, std::move(out)).first->second;
}

} // namespace

SymbolicElement SymbolicElement::generator(RelationKind r, int g) {
    if (g < 0 || g >= generator_count(r))
        throw std::invalid_argument("SymbolicElement::generator: index out of range");
    SymbolicElement e{r, {}};
    e.terms[with_exp(0, g, 1)] = 1.0;
    return e;
}

SymbolicElement SymbolicElement::operator+(const SymbolicElement& o) const {
    SymbolicElement out = *this;
    for (const auto& [k, v] : o.terms) out.terms[k] += v;
    out.prune();
    return out;
}

SymbolicElement SymbolicElement::operator-(const SymbolicElement& o) const {
    SymbolicElement out = *this;
    for (const auto& [k, v] : o.terms) out.terms[k] -= v;
    out.prune();
    return out;
}

SymbolicElement SymbolicElement::operator*(cxd c) const {
    SymbolicElement out = *this;
    for (auto& [k, v] : out.terms) v *= c;
    out.prune();
    return out;
}

SymbolicElement SymbolicElement::operator*(const SymbolicElement& o) const {
    if (rel != o.rel) throw std::invalid_argument("SymbolicElement: relation mismatch");
    const int ngen = generator_count(rel);
    SymbolicElement out{rel, {}};
    for (const auto& [k2, c2] : o.terms) {
        // fold the right monomial's generators, lowest first, into each left term
        TermMap acc;
        for (const auto& [k1, c1] : terms) acc[k1] += c1 * c2;
        for (int g = 0; g < ngen; ++g) {
            const int e = exp_of(k2, g);
            for (int rep = 0; rep < e; ++rep) {
                TermMap next;
                for (const auto& [mk, mc] : acc)
                    for (const auto& [nk, nc] : mono_times_gen(rel, mk, g))
                        next[nk] += mc * nc;
                acc = std::move(next);
            }
        }
        for (const auto& [k, v] : acc) out.terms[k] += v;
    }
    out.prune();
    return out;
}

SymbolicElement SymbolicElement::adjoint() const {
    const int ngen = generator_count(rel);
    SymbolicElement out{rel, {}};
    for (const auto& [key, c] : terms) {
        // (g0^a g1^b g2^c)^dag = g2^c g1^b g0^a, re-ordered
        TermMap acc;
        acc[0] = std::conj(c);
        for (int g = ngen - 1; g >= 0; --g) {
            const int e = exp_of(key, g);
            for (int rep = 0; rep < e; ++rep) {
                TermMap next;
                for (const auto& [mk, mc] : acc)
                    for (const auto& [nk, nc] : mono_times_gen(rel, mk, g))
                        next[nk] += mc * nc;
                acc = std::move(next);
            }
        }
        for (const auto& [k, v] : acc) out.terms[k] += v;
    }
    out.prune();
    return out;
}

void SymbolicElement::prune() {
    for (auto it = terms.begin(); it != terms.end();)
        it = std::abs(it->second) < kPrune ? terms.erase(it) : std::next(it);
}

double SymbolicElement::norm() const {
    double s = 0.0;
    for (const auto& [k, v] : terms) s += std::norm(v);
    return std::sqrt(s);
}

int SymbolicElement::degree() const {
    int d = 0;
    for (const auto& [k, v] : terms) d = std::max(d, total_degree(k, generator_count(rel)));
    return d;
}

std::string SymbolicElement::to_string() const {
    if (terms.empty()) return "0";
    std::ostringstream os;
    bool first = true;
    for (const auto& [key, c] : terms) {
        if (!first) os << " + ";
        first = false;
        os << "(" << c.real() << (c.imag() >= 0 ? "+" : "") << c.imag() << "i)";
        for (int g = 0; g < generator_count(rel); ++g) {
            const int e = exp_of(key, g);
            if (e == 0) continue;
            os << " " << generator_name(rel, g);
            if (e > 1) os << "^" << e;
        }
    }
    return os.str();
}

SymbolicElement pbw_normal_order(const SymbolicElement& e) {
    SymbolicElement out = e;
    out.prune();
    return out;
}

SymbolicElement bracket(const SymbolicElement& a, const SymbolicElement& b) {
    return a * b - b * a;
}

// ---------------------------------------------------------------------------
// Closure engine
// ---------------------------------------------------------------------------
namespace {

bool is_symbolic(const ClosureElement& e) { return std::holds_alternative<SymbolicElement>(e); }

ClosureElement bracket_any(const ClosureElement& a, const ClosureElement& b) {
    if (is_symbolic(a))
        return bracket(std::get<SymbolicElement>(a), std::get<SymbolicElement>(b));
    const Mat& ma = std::get<Mat>(a);
    const Mat& mb = std::get<Mat>(b);
    return Mat(ma * mb - mb * ma);
}

ClosureElement adjoint_any(const ClosureElement& a) {
    if (is_symbolic(a)) return std::get<SymbolicElement>(a).adjoint();
    return Mat(std::get<Mat>(a).adjoint());
}

ClosureElement add_any(const ClosureElement& a, const ClosureElement& b, cxd ca, cxd cb) {
    if (is_symbolic(a))
        return std::get<SymbolicElement>(a) * ca + std::get<SymbolicElement>(b) * cb;
    return Mat(ca * std::get<Mat>(a) + cb * std::get<Mat>(b));
}

double norm_any(const ClosureElement& a) {
    if (is_symbolic(a)) return std::get<SymbolicElement>(a).norm();
    return std::get<Mat>(a).norm();
}

// Maintains a growing orthonormal real-linear span.  Hermitian and
// anti-Hermitian directions count separately because the coefficient vectors
// interleave real and imaginary parts.
class SpanBuilder {
public:
    bool try_add(const ClosureElement& e) {
        Eigen::VectorXd v = to_rvec(e);
        const double n0 = v.norm();
        if (!(n0 > 1e-14)) return false;
        v /= n0;
        pad_all();
        // two-pass modified Gram-Schmidt
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& o : ortho_) v -= o.dot(v) * o;
        const double res = v.norm();
        if (res <= kIndependenceTol) return false;
        ortho_.push_back(v / res);
        raw_.push_back(e);
        raw_vecs_.push_back(to_rvec(e));
        return true;
    }

    // residual of projecting element onto this span, relative to its norm
    double projection_residual(const ClosureElement& e) {
        Eigen::VectorXd v = to_rvec(e);
        const double n0 = v.norm();
        if (!(n0 > 1e-14)) return 0.0;
        v /= n0;
        pad_all();
        for (int pass = 0; pass < 2; ++pass)
            for (const auto& o : ortho_) v -= o.dot(v) * o;
        return v.norm();
    }

    int dim() const { return static_cast<int>(ortho_.size()); }
    const std::vector<ClosureElement>& basis() const { return raw_; }

    // smallest/largest singular value of the raw coefficient matrix
    double rank_margin() {
        pad_all();
        if (raw_vecs_.empty()) return 1.0;
        Eigen::MatrixXd m(ambient_, static_cast<Eigen::Index>(raw_vecs_.size()));
        for (size_t i = 0; i < raw_vecs_.size(); ++i) {
            Eigen::VectorXd v = raw_vecs_[i];
            v.conservativeResizeLike(Eigen::VectorXd::Zero(ambient_));
            m.col(static_cast<Eigen::Index>(i)) = v / v.norm();
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
        const auto& sv = svd.singularValues();
        return sv(sv.size() - 1) / sv(0);
    }

private:
    static constexpr double kIndependenceTol = 1e-8;

    Eigen::VectorXd to_rvec(const ClosureElement& e) {
        if (!is_symbolic(e)) {
            const Mat& m = std::get<Mat>(e);
            ambient_ = std::max<Eigen::Index>(ambient_, 2 * m.size());
            Eigen::VectorXd v(2 * m.size());
            Eigen::Index i = 0;
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                for (Eigen::Index r = 0; r < m.rows(); ++r) {
                    v(2 * i) = m(r, c).real();
                    v(2 * i + 1) = m(r, c).imag();
                    ++i;
                }
            return v;
        }
        const SymbolicElement& s = std::get<SymbolicElement>(e);
        for (const auto& [k, c] : s.terms)
            if (registry_.emplace(k, registry_.size()).second) ambient_ += 2;
        Eigen::VectorXd v = Eigen::VectorXd::Zero(ambient_);
        for (const auto& [k, c] : s.terms) {
            const Eigen::Index i = registry_.at(k);
            v(2 * i) = c.real();
            v(2 * i + 1) = c.imag();
        }
        return v;
    }

    void pad_all() {
        for (auto* vecs : {&ortho_, &raw_vecs_})
            for (auto& o : *vecs)
                if (o.size() < ambient_) o.conservativeResizeLike(Eigen::VectorXd::Zero(ambient_));
    }

    std::map<uint32_t, Eigen::Index> registry_;
    Eigen::Index ambient_ = 0;
    std::vector<Eigen::VectorXd> ortho_;
    std::vector<Eigen::VectorXd> raw_vecs_;
    std::vector<ClosureElement> raw_;
};

std::pair<LieSpan, ClosureReport> run_closure(const std::vector<ClosureElement>& seed, int cap) {
    SpanBuilder sb;
    for (const auto& e : seed) sb.try_add(e);
    ClosureReport rep;
    rep.cap = cap;
    rep.dims.push_back(sb.dim());

    size_t processed = 0; // pairs (i, j) with j < processed are already bracketed
    bool truncated = false;
    while (true) {
        const size_t nb = sb.basis().size();
        bool capped = false;
        try {
            for (size_t j = processed; j < nb && !capped; ++j)
                for (size_t i = 0; i < j && !capped; ++i) {
                    sb.try_add(bracket_any(sb.basis()[i], sb.basis()[j]));
                    if (sb.dim() > cap) capped = true;
                }
        } catch (const DegreeOverflowError&) {
            truncated = true;
        }
        processed = nb;
        rep.dims.push_back(sb.dim());
        if (capped || truncated) {
            rep.closed = false;
            break;
        }
        if (rep.dims[rep.dims.size() - 1] == rep.dims[rep.dims.size() - 2]) {
            rep.closed = true;
            break;
        }
    }
    rep.verdict = rep.closed ? ClosureReport::Verdict::Principal
                             : ClosureReport::Verdict::ChaoticUpToCap;

    if (rep.closed && sb.rank_margin() <= 1e-9)
        throw NumericalRankError("closure: basis conditioning below threshold");

    LieSpan span;
    span.basis = sb.basis();
    span.dim = sb.dim();
    return {span, rep};
}

} // namespace

std::pair<LieSpan, ClosureReport> close_observable_algebra(
    const std::vector<ClosureElement>& generators, int cap) {
    if (generators.empty()) throw std::invalid_argument("close_observable_algebra: no generators");
    for (const auto& g : generators) {
        const auto adj = adjoint_any(g);
        const auto diff = add_any(g, adj, 1.0, -1.0);
        if (norm_any(diff) > 1e-10 * (1.0 + norm_any(g)))
            throw std::invalid_argument("close_observable_algebra: generators must be Hermitian");
    }
    return run_closure(generators, cap);
}

std::pair<LieSpan, ClosureReport> close_instrumental_algebra(const LieSpan& f,
                                                             const ClosureElement& quadratic,
                                                             int cap) {
    std::vector<ClosureElement> seed = f.basis;
    seed.push_back(quadratic);
    return run_closure(seed, cap);
}

CartanSplit cartan_split(const LieSpan& g) {
    SpanBuilder so, sl;
    for (const auto& e : g.basis) {
        const auto adj = adjoint_any(e);
        const auto h = add_any(e, adj, 0.5, 0.5);   // Hermitian part
        const auto k = add_any(e, adj, 0.5, -0.5);  // anti-Hermitian part
        const double ne = norm_any(e);
        if (norm_any(h) > 1e-12 * (1.0 + ne)) sl.try_add(h);
        if (norm_any(k) > 1e-12 * (1.0 + ne)) so.try_add(k);
    }
    if (so.dim() + sl.dim() != g.dim)
        throw std::invalid_argument("cartan_split: basis does not split by Hermiticity");

    CartanSplit out;
    double worst = 0.0;
    auto check = [&](const std::vector<ClosureElement>& a, const std::vector<ClosureElement>& b,
                     SpanBuilder& target) {
        for (const auto& x : a)
            for (const auto& y : b)
                worst = std::max(worst, target.projection_residual(bracket_any(x, y)));
    };
    // [o,o] in o; [o,l] in l; [l,l] in o
    // (checks run before moving the builders' bases)
    {
        // copy bases first; projection_residual mutates only paddings
        auto ob = so;
        auto lb = sl;
        check(so.basis(), so.basis(), ob);
        check(so.basis(), sl.basis(), lb);
        check(sl.basis(), sl.basis(), ob);
    }
    out.bracket_residual = worst;
    out.g_o.basis = so.basis();
    out.g_o.dim = so.dim();
    out.g_l.basis = sl.basis();
    out.g_l.dim = sl.dim();
    return out;
}

double jacobi_residual(const LieSpan& g, int trials, uint64_t seed) {
    if (g.basis.size() < 3) return 0.0;
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) {
        const auto& a = g.basis[rng.next_u64() % g.basis.size()];
        const auto& b = g.basis[rng.next_u64() % g.basis.size()];
        const auto& c = g.basis[rng.next_u64() % g.basis.size()];
        const auto j1 = bracket_any(a, bracket_any(b, c));
        const auto j2 = bracket_any(b, bracket_any(c, a));
        const auto j3 = bracket_any(c, bracket_any(a, b));
        const auto s = add_any(add_any(j1, j2, 1.0, 1.0), j3, 1.0, 1.0);
        const double scale = norm_any(a) * norm_any(b) * norm_any(c) + 1e-300;
        worst = std::max(worst, norm_any(s) / scale);
    }
    return worst;
}

} // namespace kodsim
