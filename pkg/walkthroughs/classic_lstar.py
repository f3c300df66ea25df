"""Learn the language "even number of a's and even number of b's" with classic L*.

Prints every table change and the final observation table.
Run: python3 walkthroughs/classic_lstar.py
"""

from enap.lstar import BruteForceTeacher, even_ab, run_lstar

AB = ("a", "b")

teacher = BruteForceTeacher(even_ab, AB, max_len=8, order=("b", "a"))
res = run_lstar(teacher, AB)

for e in res.events:
    detail = {k: v for k, v in e.items() if k not in ("round", "event")}
    print(f"round {e['round']}: {e['event']:<15} {detail}")

print()
print(res.table.render())
print()
print(f"{res.dfa.n_states} states, {teacher.mq_count} membership queries")
for w in ["", "aa", "ab", "aabb", "ba", "abab"]:
    print(f"  {w or 'eps':<5} -> {'accept' if res.dfa.accepts(w) else 'reject'}")
