from clickgraph.core import CourseSchedule, Interaction, LearningObject, StudentTimeSeries


def make_schedule(n_weeks=10, videos=(1, 2), problems=(1, 2), graded=(True, False), durations=None):
    objs = []
    for i, w in enumerate(videos):
        d = durations[i] if durations else 600.0
        objs.append(LearningObject(f"v{i}", "video", w, duration_seconds=d))
    for j, w in enumerate(problems):
        objs.append(LearningObject(f"p{j}", "problem", w, deadline_week=min(w + 1, n_weeks), is_graded=graded[j]))
    return CourseSchedule("TOY", 0, n_weeks, objs)


def video(t, action="Play", vid=0):
    return Interaction(float(t), action, f"v{vid}", video_id=vid)


def problem(t, pid=0, sub=1, action="IsAssignment"):
    return Interaction(float(t), action, f"p{pid}", problem_id=pid, submission_num=sub)


def series(sid, inters, label=0):
    return StudentTimeSeries(sid, list(inters), label)


def toy_cohort(n=200, seed=0, n_weeks=4, separable=True, play_rates=(15, 15)):
    """Two behaviour profiles: passers pause often, failers rarely; labels alternate by index.

    ``play_rates`` gives the (pass, fail) mean Play counts.
    """
    import numpy as np

    rng = np.random.default_rng(seed)
    sch = make_schedule(n_weeks=n_weeks, videos=(1, 2), problems=(1, 2), graded=(True, False))
    horizon = sch.duration_seconds - 1
    students = []
    for i in range(n):
        label = i % 2
        pause_rate = (2 if label else 12) if separable else 7
        plays = rng.poisson(play_rates[label])
        pauses = rng.poisson(pause_rate)
        ints = [video(t, "Play", vid=int(rng.integers(2))) for t in rng.uniform(0, horizon, plays)]
        ints += [video(t, "Pause", vid=int(rng.integers(2))) for t in rng.uniform(0, horizon, pauses)]
        ints += [problem(t, pid=int(rng.integers(2)), sub=int(rng.integers(1, 4)))
                 for t in rng.uniform(0, horizon, rng.poisson(3))]
        students.append(series(f"s{i:04d}", ints, label))
    return sch, students
