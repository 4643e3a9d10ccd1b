#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "moflow/validity.hpp"
#include "support/molgen.hpp"

using namespace moflow;
using namespace moflow::validity;

TEST_CASE("valency sums and allowances") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("O");
    m.add_bond(0, 1, 2);
    CHECK(valency_sum(m, 0) == 2);
    CHECK(valency_sum(m, 1) == 2);
    CHECK(valency_allowance(Atom{"C", 0}) == 4);
    CHECK(valency_allowance(Atom{"N", 0}) == 3);
    CHECK(valency_allowance(Atom{"N", 1}) == 4);  // Ch applies
    CHECK(valency_allowance(Atom{"O", 1}) == 3);
    CHECK(valency_allowance(Atom{"S", 1}) == 7);
    CHECK(valency_allowance(Atom{"O", -1}) == 2);  // only the + forms get Ch
    CHECK(valency_allowance(Atom{"F", 0}) == 1);
    CHECK(valency_allowance(Atom{"Cl", 0}) == 1);
    CHECK(valency_allowance(Atom{"P", 0}) == 5);
    CHECK(valency_allowance(Atom{"I", 0}) == 1);
    CHECK(valency_allowance(Atom{"Br", 0}) == 1);
}

TEST_CASE("charged nitrogen with four single bonds is valid") {
    Molecule m;
    m.add_atom("N", 1);
    for (int i = 0; i < 4; ++i) {
        m.add_atom("C");
        m.add_bond(0, static_cast<std::size_t>(i + 1), 1);
    }
    ValencyReport r = check_valency(m);
    CHECK(r.order_sums[0] == 4);
    CHECK(r.allowances[0] == 4);
    CHECK(r.valid);
}

TEST_CASE("carbon {1,1,2} valid; one more single bond violates") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("O");
    m.add_bond(0, 1, 1);
    m.add_bond(0, 2, 1);
    m.add_bond(0, 3, 2);
    CHECK(valency_sum(m, 0) == 4);
    CHECK(check_valency(m).valid);
    m.add_atom("C");
    m.add_bond(0, 4, 1);
    ValencyReport r = check_valency(m);
    CHECK(valency_sum(m, 0) == 5);
    CHECK_FALSE(r.valid);
    REQUIRE(r.violations.size() == 1);
    CHECK(r.violations[0] == 0);
}

TEST_CASE("correct leaves valid connected molecules unchanged") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("N");
    m.add_bond(0, 1, 3);
    CHECK(correct(m) == m);
}

TEST_CASE("correct reduces the largest-order bond of the first violator") {
    // C with a triple and a double bond: sum 5 -> triple becomes double
    Molecule m;
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("O");
    m.add_bond(0, 1, 3);
    m.add_bond(0, 2, 2);
    Molecule fixed = correct(m);
    CHECK(fixed.bond_order(0, 1) == 2);
    CHECK(fixed.bond_order(0, 2) == 2);
    CHECK(check_valency(fixed).valid);
}

TEST_CASE("order-1 reduction removes the bond entirely") {
    // F with two single bonds: one must disappear; the fragment splits and the
    // larger component is kept
    Molecule m;
    m.add_atom("F");
    m.add_atom("C");
    m.add_atom("C");
    m.add_bond(0, 1, 1);
    m.add_bond(0, 2, 1);
    Molecule fixed = correct(m);
    CHECK(check_valency(fixed).valid);
    // one bond is removed outright; the detached C is dropped with the component rule
    CHECK(fixed.atoms.size() == 2);
    CHECK(fixed.bonds.size() == 1);
}

TEST_CASE("tie-breaks: max-order bond with the lowest partner index") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("O");
    m.add_atom("O");
    m.add_atom("C");
    m.add_bond(0, 1, 2);
    m.add_bond(0, 2, 2);
    m.add_bond(0, 3, 1);  // sum 5 at atom 0; two double bonds tie
    Molecule fixed = correct(m);
    CHECK(fixed.bond_order(0, 1) == 1);  // lower partner index reduced
    CHECK(fixed.bond_order(0, 2) == 2);
    CHECK(fixed.bond_order(0, 3) == 1);
}

TEST_CASE("largest_component selection and tie rule") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("O");
    m.add_bond(0, 1, 1);
    m.add_bond(1, 2, 1);  // chain of 3 + isolated O
    Molecule big = largest_component(m);
    CHECK(big.atoms.size() == 3);
    CHECK(big.bonds.size() == 2);

    Molecule tie;
    tie.add_atom("O");
    tie.add_atom("N");
    tie.add_atom("C");
    tie.add_atom("C");
    tie.add_bond(0, 1, 1);
    tie.add_bond(2, 3, 1);
    Molecule kept = largest_component(tie);
    REQUIRE(kept.atoms.size() == 2);
    CHECK(kept.atoms[0].element == "O");  // component containing atom 0 wins

    CHECK(largest_component(Molecule{}).empty());
    Molecule conn;
    conn.add_atom("C");
    conn.add_atom("C");
    conn.add_bond(0, 1, 1);
    CHECK(largest_component(conn) == conn);
}

TEST_CASE("correct on valid two-component input keeps the larger part") {
    Molecule m;
    m.add_atom("C");
    m.add_atom("C");
    m.add_atom("O");
    m.add_bond(0, 1, 1);  // pair + isolated O
    Molecule fixed = correct(m);
    CHECK(fixed.atoms.size() == 2);
}

TEST_CASE("correct is idempotent and order-sum non-increasing on random graphs") {
    Rng rng(47);
    for (int trial = 0; trial < 200; ++trial) {
        // deliberately over-bonded random multigraph-free graph
        Molecule m;
        const std::size_t n = 2 + rng.index(5);
        const char* els[] = {"C", "N", "O", "F"};
        for (std::size_t i = 0; i < n; ++i) m.add_atom(els[rng.index(4)]);
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                if (rng.uniform() < 0.5) {
                    m.add_bond(i, j, 1 + static_cast<int>(rng.index(3)));
                }
            }
        }
        auto order_total = [](const Molecule& x) {
            int s = 0;
            for (const Bond& b : x.bonds) s += b.order;
            return s;
        };
        Molecule fixed = correct(m);
        CHECK(check_valency(fixed).valid);
        CHECK(correct(fixed) == fixed);
        CHECK(order_total(fixed) <= order_total(m));
        CHECK(largest_component(fixed) == fixed);  // connected
    }
}
