"""Walk one patient's diagnosis history through the per-eye labeling rules."""
import datetime as dt

from gonscreen import registry as reg

D = dt.date
code_map = reg.DEFAULT_CODE_MAP

images = [
    reg.ImageRecord("img-1", "P1", "L", D(2015, 3, 1), "clinic", "a.png", age_years=61, sex="F"),
    reg.ImageRecord("img-2", "P1", "L", D(2018, 6, 1), "clinic", "b.png", age_years=64, sex="F"),
    reg.ImageRecord("img-3", "P1", "R", D(2018, 6, 1), "clinic", "c.png", age_years=64, sex="F"),
    reg.ImageRecord("img-4", "P2", "R", D(2019, 1, 9), "clinic", "d.png", age_years=15, sex="M"),
    reg.ImageRecord("img-5", "P3", "L", D(2020, 2, 2), "clinic", "e.png", age_years=50, sex="M"),
]


def event(pid, side, when, code):
    return reg.DiagnosisEvent(pid, side, when, code, reg.categorize_code(code, code_map))


events = [
    event("P1", "B", D(2014, 1, 1), "routine_exam"),
    event("P1", "L", D(2017, 2, 1), "glaucoma_poag"),  # left eye converts; right eye stays negative
    event("P2", "R", D(2019, 1, 9), "cataract"),
    event("P3", "L", D(2020, 1, 1), "ocular_hypertension"),
]

labeled = reg.apply_exclusions(reg.derive_eye_labels(images, events), min_age=18)
for rec in labeled:
    print(f"{rec.image_id}  {rec.patient_id}/{rec.eye}  {rec.acquired_at}  -> {rec.label_state}")

flow = reg.flow_report(labeled)
print("\nflow:", {k: v for k, v in flow.items() if k != "excluded"})
print("excluded:", {k: v for k, v in flow["excluded"].items() if v})
