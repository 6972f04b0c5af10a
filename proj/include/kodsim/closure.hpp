#pragma once

#include <complex>
#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "kodsim/linalg.hpp"

namespace kodsim {

struct DegreeOverflowError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalRankError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Commutation tables for the symbolic (universal-enveloping) backend.
//   Abelian: one generator x, everything commutes.
//   Weyl:    q, p with qp - pq = i (the unit is the empty monomial).
//   Su2:     jx, jy, jz with [J_mu, J_nu] = i eps_{mu nu tau} J_tau.
enum class RelationKind { Abelian, Weyl, Su2 };

int generator_count(RelationKind rel);
std::string generator_name(RelationKind rel, int g);

// Elements of U_f as complex combinations of PBW normal-ordered monomials.
// Monomial key packs per-generator exponents in 8-bit fields, lowest
// generator in the lowest byte; the empty key is the unit.
struct SymbolicElement {
    RelationKind rel = RelationKind::Abelian;
    std::map<uint32_t, cxd> terms;

    static constexpr int kMaxDegree = 24;
    static constexpr double kPrune = 1e-12;

    static SymbolicElement zero(RelationKind r) { return SymbolicElement{r, {}}; }
    static SymbolicElement unit(RelationKind r) { return SymbolicElement{r, {{0u, 1.0}}}; }
    static SymbolicElement generator(RelationKind r, int g);

    SymbolicElement operator+(const SymbolicElement& o) const;
    SymbolicElement operator-(const SymbolicElement& o) const;
    SymbolicElement operator*(cxd c) const;
    SymbolicElement operator*(const SymbolicElement& o) const;

    SymbolicElement adjoint() const; // generators are Hermitian
    void prune();
    double norm() const;
    int degree() const;
    std::string to_string() const;
};

// Canonicalize (combine like monomials, prune).  Construction keeps elements
// normal-ordered already, so this is idempotent.
SymbolicElement pbw_normal_order(const SymbolicElement& e);

SymbolicElement bracket(const SymbolicElement& a, const SymbolicElement& b);

// ---------------------------------------------------------------------------
// Lie-closure engine over either backend
// ---------------------------------------------------------------------------
using ClosureElement = std::variant<Mat, SymbolicElement>;

struct LieSpan {
    std::vector<ClosureElement> basis;
    int dim = 0; // real-linear dimension
};

struct ClosureReport {
    std::vector<int> dims; // per iteration; closed iff the last two are equal
    bool closed = false;
    int cap = 0;
    enum class Verdict { Principal, ChaoticUpToCap } verdict = Verdict::Principal;
};

// Iterates Gamma^{(j+1)} = Gamma^{(j)} + [Gamma^{(j)}, Gamma^{(j)}] until the
// real-linear dimension is stable or the cap is exceeded.
std::pair<LieSpan, ClosureReport> close_observable_algebra(
    const std::vector<ClosureElement>& generators, int cap = 60);

// Stage two: adds the quadratic generator to a closed observable algebra and
// iterates again.  Verdict is Principal when closed.
std::pair<LieSpan, ClosureReport> close_instrumental_algebra(
    const LieSpan& f, const ClosureElement& quadratic, int cap = 60);

struct CartanSplit {
    LieSpan g_o; // anti-Hermitian part (unitary directions)
    LieSpan g_l; // Hermitian part (positive directions)
    double bracket_residual = 0.0; // worst projection defect of the pair relations
};

CartanSplit cartan_split(const LieSpan& g);

// Jacobi residual ||[a,[b,c]] + [b,[c,a]] + [c,[a,b]]|| for random basis triples.
double jacobi_residual(const LieSpan& g, int trials, uint64_t seed);

} // namespace kodsim
